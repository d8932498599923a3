//! Token-metadata records: a binary variable code (discrete identity without
//! artificial ordering), normalized start/end timestamps, the token's prior,
//! and optionally a one-hot statistic-kind code.

use super::ModelError;
use crate::value::StatKind;

/// Bits needed to encode variable indices 0..V-1, at least one.
pub fn variable_code_width(n_variables: usize) -> usize {
    let max_index = n_variables.max(2) - 1;
    (usize::BITS - max_index.leading_zeros()) as usize
}

/// One encoded token record.
#[derive(Clone, Debug, PartialEq)]
pub struct TsiRecord {
    pub fields: Vec<f64>,
}

/// Encode one token's metadata. The record layout is
/// `[variable bits (MSB first), t_start/T, t_end/T, prior, (kind one-hot)]`.
pub fn tsi_encode(
    variable: usize,
    t_start: usize,
    t_end: usize,
    prior: f64,
    n_variables: usize,
    series_len: usize,
    stat_kind: Option<StatKind>,
) -> Result<TsiRecord, ModelError> {
    if variable >= n_variables {
        return Err(ModelError::VariableOutOfRange {
            variable,
            n_variables,
        });
    }
    if t_start >= t_end || t_end > series_len {
        return Err(ModelError::BadInterval {
            t_start,
            t_end,
            series_len,
        });
    }
    if prior < 0.0 {
        return Err(ModelError::NegativePrior(prior));
    }
    let width = variable_code_width(n_variables);
    let mut fields = Vec::with_capacity(width + 3 + 3);
    for bit in (0..width).rev() {
        fields.push(((variable >> bit) & 1) as f64);
    }
    fields.push(t_start as f64 / series_len as f64);
    fields.push(t_end as f64 / series_len as f64);
    fields.push(prior);
    if let Some(kind) = stat_kind {
        let mut one_hot = [0.0; 3];
        one_hot[match kind {
            StatKind::Mean => 0,
            StatKind::Std => 1,
            StatKind::Slope => 2,
        }] = 1.0;
        fields.extend_from_slice(&one_hot);
    }
    Ok(TsiRecord { fields })
}
