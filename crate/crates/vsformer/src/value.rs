//! Value tokens: every variable is segmented into w equal-length intervals
//! for each granularity level w = 1..=M, and each interval yields its mean,
//! population standard deviation, and least-squares slope.

use crate::dataset::MtsDataset;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ValueError {
    #[error("granularity {w} is invalid for series length {t}")]
    InvalidGranularity { w: usize, t: usize },
    #[error("interval statistics need a non-empty segment")]
    EmptySegment,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatKind {
    Mean,
    Std,
    Slope,
}

impl StatKind {
    pub const ALL: [StatKind; 3] = [StatKind::Mean, StatKind::Std, StatKind::Slope];

    pub fn name(self) -> &'static str {
        match self {
            StatKind::Mean => "mean",
            StatKind::Std => "std",
            StatKind::Slope => "slope",
        }
    }
}

/// A single interval statistic at some granularity level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueToken {
    pub variable: usize,
    /// Granularity level: the series was split into `granularity` intervals.
    pub granularity: usize,
    /// Interval index within the level.
    pub interval: usize,
    pub kind: StatKind,
    pub value: f64,
    pub t_start: usize,
    pub t_end: usize,
}

/// `w` contiguous intervals covering [0, T): base length floor(T/w), with the
/// remainder spread one extra point each over the first T mod w intervals.
pub fn partition_intervals(t: usize, w: usize) -> Result<Vec<(usize, usize)>, ValueError> {
    if w == 0 || w > t {
        return Err(ValueError::InvalidGranularity { w, t });
    }
    let base = t / w;
    let extra = t % w;
    let mut out = Vec::with_capacity(w);
    let mut start = 0;
    for i in 0..w {
        let len = base + usize::from(i < extra);
        out.push((start, start + len));
        start += len;
    }
    Ok(out)
}

/// Mean, population standard deviation, and least-squares slope of value
/// against within-segment index. Single points get sigma = slope = 0.
pub fn interval_stats(segment: &[f64]) -> Result<(f64, f64, f64), ValueError> {
    let n = segment.len();
    if n == 0 {
        return Err(ValueError::EmptySegment);
    }
    let nf = n as f64;
    let mean = segment.iter().sum::<f64>() / nf;
    if n == 1 {
        return Ok((mean, 0.0, 0.0));
    }
    let var = segment.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
    let std = var.sqrt();
    // slope of the least-squares line over x = 0..n-1:
    // sum_x (x - x_mean)(y - y_mean) / sum_x (x - x_mean)^2
    let x_mean = (nf - 1.0) / 2.0;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &y) in segment.iter().enumerate() {
        let dx = i as f64 - x_mean;
        num += dx * (y - mean);
        den += dx * dx;
    }
    Ok((mean, std, num / den))
}

/// All value tokens of a dataset, ordered per instance by
/// (variable, granularity, interval, statistic). Every instance yields
/// exactly V * 3 * (1+M)M/2 tokens.
pub fn build_value_tokens(
    dataset: &MtsDataset,
    max_granularity: usize,
) -> Result<Vec<Vec<ValueToken>>, ValueError> {
    let t = dataset.series_len();
    if max_granularity == 0 || max_granularity > t {
        return Err(ValueError::InvalidGranularity {
            w: max_granularity,
            t,
        });
    }
    // Interval layouts are shared by all instances.
    let mut layouts = Vec::with_capacity(max_granularity);
    for w in 1..=max_granularity {
        layouts.push(partition_intervals(t, w)?);
    }

    dataset
        .instances()
        .iter()
        .map(|inst| {
            let mut tokens = Vec::new();
            for (variable, series) in inst.values.iter().enumerate() {
                for (w_idx, layout) in layouts.iter().enumerate() {
                    for (interval, &(t_start, t_end)) in layout.iter().enumerate() {
                        let (mean, std, slope) = interval_stats(&series[t_start..t_end])?;
                        for kind in StatKind::ALL {
                            let value = match kind {
                                StatKind::Mean => mean,
                                StatKind::Std => std,
                                StatKind::Slope => slope,
                            };
                            tokens.push(ValueToken {
                                variable,
                                granularity: w_idx + 1,
                                interval,
                                kind,
                                value,
                                t_start,
                                t_end,
                            });
                        }
                    }
                }
            }
            Ok(tokens)
        })
        .collect()
}

/// The token-count formula V * 3 * (1+M)M/2.
pub fn value_token_count(n_variables: usize, max_granularity: usize) -> usize {
    n_variables * 3 * ((1 + max_granularity) * max_granularity / 2)
}
