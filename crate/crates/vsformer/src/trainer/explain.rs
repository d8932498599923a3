//! Attention-based token report: which tokens the trained model listened to
//! for one instance, ranked by mean received attention in the final encoder
//! layer (column means of the attention matrix, averaged over heads).

use super::checkpoint::ModelCheckpoint;
use super::pipeline::{model_config, tokenize_dataset};
use super::{check_dataset_compatible, TrainError};
use crate::dataset::MtsDataset;
use crate::model::{bind_params, model_forward, Phase};
use vsf_numerics::Graph;

#[derive(Clone, Debug)]
pub struct ExplainEntry {
    pub token_index: usize,
    pub attention: f64,
    pub variable: usize,
    pub t_start: usize,
    pub t_end: usize,
    pub prior: f64,
    /// Statistic kind and value for value tokens.
    pub statistic: Option<(&'static str, f64)>,
    /// Match distance for shape tokens.
    pub distance: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ExplainReport {
    pub instance: usize,
    pub predicted_class: String,
    pub actual_class: String,
    pub probabilities: Vec<f64>,
    pub lambda: f64,
    /// Shape tokens ranked by received attention, ties broken by index.
    pub shape: Vec<ExplainEntry>,
    /// Value tokens ranked the same way.
    pub value: Vec<ExplainEntry>,
}

fn rank(mut entries: Vec<ExplainEntry>) -> Vec<ExplainEntry> {
    entries.sort_by(|a, b| {
        b.attention
            .partial_cmp(&a.attention)
            .expect("finite attention weights")
            .then(a.token_index.cmp(&b.token_index))
    });
    entries
}

pub fn explain(
    cp: &ModelCheckpoint,
    dataset: &MtsDataset,
    instance: usize,
) -> Result<ExplainReport, TrainError> {
    check_dataset_compatible(cp, dataset)?;
    if instance >= dataset.len() {
        return Err(TrainError::Config(format!(
            "instance {instance} out of range for {} instances",
            dataset.len()
        )));
    }
    let single = dataset.subset(&[instance]);
    let mcfg = model_config(&cp.artifacts, &cp.config, &single);
    let tokenized = tokenize_dataset(&single, &cp.artifacts, &mcfg)?;

    let mut g = Graph::new();
    let bound = bind_params(&mut g, &cp.params)?;
    let inputs = tokenized.gather(&[0]);
    let out = model_forward(&mut g, &cp.params, &bound, &inputs, Phase::Eval, true)?;
    let probs = g.value(out.probs).row_slice(0).to_vec();
    let predicted = super::metrics::argmax(&probs);

    let shape = if let Some(received) = out.shape_attention.first() {
        let tokens = &tokenized.shape_tokens[0];
        rank(
            tokens
                .iter()
                .enumerate()
                .map(|(i, t)| ExplainEntry {
                    token_index: i,
                    attention: received[i],
                    variable: t.variable,
                    t_start: t.t_start,
                    t_end: t.t_end,
                    prior: tokenized.shape_priors[0][i],
                    statistic: None,
                    distance: Some(t.distance),
                })
                .collect(),
        )
    } else {
        Vec::new()
    };

    let value = if let Some(received) = out.value_attention.first() {
        let tokens = &tokenized.value_tokens[0];
        rank(
            tokens
                .iter()
                .enumerate()
                .map(|(i, t)| ExplainEntry {
                    token_index: i,
                    attention: received[i],
                    variable: t.variable,
                    t_start: t.t_start,
                    t_end: t.t_end,
                    prior: tokenized.value_priors[i],
                    statistic: Some((t.kind.name(), t.value)),
                    distance: None,
                })
                .collect(),
        )
    } else {
        Vec::new()
    };

    let lambda = cp
        .params
        .config
        .mode
        .fixed_lambda()
        .unwrap_or(out.lambdas[0]);
    Ok(ExplainReport {
        instance,
        predicted_class: cp.class_names[predicted].clone(),
        actual_class: cp.class_names[dataset.instances()[instance].label].clone(),
        probabilities: probs,
        lambda,
        shape,
        value,
    })
}
