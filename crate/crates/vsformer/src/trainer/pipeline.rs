//! Fitting the frozen tokenization artifacts on the training split and
//! turning raw datasets into model inputs with them.

use super::{TrainConfig, TrainError};
use crate::dataset::MtsDataset;
use crate::model::{tsi_encode, AblationMode, BranchInput, ModelConfig, ModelInputs};
use crate::priors::{
    fit_feature_importance, prototype_weight, shape_prior, shape_token_weight, FeatureImportance,
    PrototypeWeight,
};
use crate::shape::{build_shape_tokens, discover_prototypes, znormalize, Prototype, ShapeToken};
use crate::value::{build_value_tokens, value_token_count, ValueToken};
use serde::{Deserialize, Serialize};
use vsf_numerics::Tensor;

/// Everything learned from the training split that tokenization needs at
/// inference time. Frozen once fitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerArtifacts {
    pub motif_len: usize,
    pub granularity_max: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Empty when the mode has no shape branch.
    pub prototypes: Vec<Prototype>,
    /// Aligned with `prototypes`.
    pub prototype_weights: Vec<PrototypeWeight>,
    /// Per value-token position; empty when the mode has no value branch.
    pub feature_importance: Vec<FeatureImportance>,
    /// Anything worth surfacing from fitting, e.g. motif-pair shortfalls.
    pub warnings: Vec<String>,
}

/// Fit prototypes, prototype weights, and feature importances on the
/// training split only.
pub fn fit_artifacts(
    train: &MtsDataset,
    config: &TrainConfig,
) -> Result<TokenizerArtifacts, TrainError> {
    let mode = config.mode;
    let motif_len = config.motif_len_for(train.series_len());
    let labels = train.labels();
    let mut warnings = Vec::new();

    let (prototypes, prototype_weights) = if mode.uses_shape_branch() {
        let prototypes = discover_prototypes(train, config.k, motif_len)?;
        let expected = config.k * train.n_variables() * train.n_classes();
        if prototypes.len() < expected {
            warnings.push(format!(
                "found {} motif pairs, expected {expected}; token counts shrink accordingly",
                prototypes.len()
            ));
        }
        let train_tokens = build_shape_tokens(train, &prototypes)?;
        let mut weights = Vec::with_capacity(prototypes.len());
        for (pid, proto) in prototypes.iter().enumerate() {
            let distances: Vec<f64> = train_tokens.iter().map(|t| t[pid].distance).collect();
            weights.push(prototype_weight(
                pid,
                &distances,
                &labels,
                proto.class,
                config.alpha,
            )?);
        }
        (prototypes, weights)
    } else {
        (Vec::new(), Vec::new())
    };

    let feature_importance = if mode.uses_value_branch() {
        let tokens = build_value_tokens(train, config.granularity_max)?;
        let n_positions = tokens.first().map_or(0, |t| t.len());
        let mut tables = Vec::with_capacity(n_positions);
        for position in 0..n_positions {
            let values: Vec<f64> = tokens.iter().map(|t| t[position].value).collect();
            tables.push(fit_feature_importance(
                &values,
                &labels,
                train.n_classes(),
                config.bins,
            )?);
        }
        tables
    } else {
        Vec::new()
    };

    Ok(TokenizerArtifacts {
        motif_len,
        granularity_max: config.granularity_max,
        alpha: config.alpha,
        beta: config.beta,
        prototypes,
        prototype_weights,
        feature_importance,
        warnings,
    })
}

/// The model-facing view of the fitted artifacts.
pub fn model_config(
    artifacts: &TokenizerArtifacts,
    config: &TrainConfig,
    dataset: &MtsDataset,
) -> ModelConfig {
    ModelConfig {
        n_classes: dataset.n_classes(),
        n_variables: dataset.n_variables(),
        series_len: dataset.series_len(),
        shape_d_model: config.d_model,
        shape_d_ff: config.d_ff,
        encoder_layers: config.encoder_layers,
        motif_len: artifacts.motif_len,
        n_shape_tokens: artifacts.prototypes.len(),
        n_value_tokens: if config.mode.uses_value_branch() {
            value_token_count(dataset.n_variables(), artifacts.granularity_max)
        } else {
            0
        },
        mode: config.mode,
        tsi_stat_kind: config.tsi_stat_kind,
    }
}

/// A dataset tokenized under frozen artifacts: per-instance model inputs
/// plus the raw token lists for dumps and reports.
#[derive(Clone, Debug)]
pub struct TokenizedDataset {
    pub labels: Vec<usize>,
    pub shape_inputs: Option<Vec<BranchInput>>,
    pub value_inputs: Option<Vec<BranchInput>>,
    pub shape_tokens: Vec<Vec<ShapeToken>>,
    pub value_tokens: Vec<Vec<ValueToken>>,
    pub shape_priors: Vec<Vec<f64>>,
    /// One prior per value-token position, shared by every instance.
    pub value_priors: Vec<f64>,
}

impl TokenizedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Model inputs for a subset of instances, cloned in the given order.
    pub fn gather(&self, indices: &[usize]) -> ModelInputs {
        ModelInputs {
            shape: self
                .shape_inputs
                .as_ref()
                .map(|v| indices.iter().map(|&i| v[i].clone()).collect()),
            value: self
                .value_inputs
                .as_ref()
                .map(|v| indices.iter().map(|&i| v[i].clone()).collect()),
        }
    }

    pub fn gather_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Tokenize any dataset (train, validation, or test) against the frozen
/// artifacts. Shape-token priors use the instance's own match distance;
/// value-token priors are the fitted importances.
pub fn tokenize_dataset(
    dataset: &MtsDataset,
    artifacts: &TokenizerArtifacts,
    model: &ModelConfig,
) -> Result<TokenizedDataset, TrainError> {
    let mode = model.mode;
    let (n_variables, series_len) = (dataset.n_variables(), dataset.series_len());

    let mut shape_tokens = Vec::new();
    let mut shape_priors = Vec::new();
    let shape_inputs = if mode.uses_shape_branch() {
        shape_tokens = build_shape_tokens(dataset, &artifacts.prototypes)?;
        let mut inputs = Vec::with_capacity(dataset.len());
        for tokens in &shape_tokens {
            let mut priors = Vec::with_capacity(tokens.len());
            let mut token_rows = Vec::with_capacity(tokens.len());
            let mut tsi_rows = Vec::with_capacity(tokens.len());
            for token in tokens {
                let proto_weight = artifacts.prototype_weights[token.prototype].weight;
                let prior = shape_prior(
                    proto_weight,
                    shape_token_weight(token.distance, artifacts.beta)?,
                );
                priors.push(prior);
                // the branch consumes the shape of the subsequence, not its scale
                token_rows.push(znormalize(&token.values));
                tsi_rows.push(
                    tsi_encode(
                        token.variable,
                        token.t_start,
                        token.t_end,
                        prior,
                        n_variables,
                        series_len,
                        None,
                    )?
                    .fields,
                );
            }
            inputs.push(BranchInput {
                tokens: Tensor::from_rows(&token_rows)?,
                tsi: Tensor::from_rows(&tsi_rows)?,
                priors: priors.clone(),
            });
            shape_priors.push(priors);
        }
        Some(inputs)
    } else {
        None
    };

    let mut value_tokens = Vec::new();
    let mut value_priors = Vec::new();
    let value_inputs = if mode.uses_value_branch() {
        value_tokens = build_value_tokens(dataset, artifacts.granularity_max)?;
        let n_positions = artifacts.feature_importance.len();
        value_priors = artifacts
            .feature_importance
            .iter()
            .map(|fi| fi.importance)
            .collect();
        let mut inputs = Vec::with_capacity(dataset.len());
        for tokens in &value_tokens {
            if tokens.len() != n_positions {
                return Err(TrainError::Config(format!(
                    "value tokenization produced {} positions, artifacts carry {n_positions}",
                    tokens.len()
                )));
            }
            let mut token_rows = Vec::with_capacity(tokens.len());
            let mut tsi_rows = Vec::with_capacity(tokens.len());
            for (token, &prior) in tokens.iter().zip(&value_priors) {
                token_rows.push(vec![token.value]);
                tsi_rows.push(
                    tsi_encode(
                        token.variable,
                        token.t_start,
                        token.t_end,
                        prior,
                        n_variables,
                        series_len,
                        model.tsi_stat_kind.then_some(token.kind),
                    )?
                    .fields,
                );
            }
            inputs.push(BranchInput {
                tokens: Tensor::from_rows(&token_rows)?,
                tsi: Tensor::from_rows(&tsi_rows)?,
                priors: value_priors.clone(),
            });
        }
        Some(inputs)
    } else {
        None
    };

    Ok(TokenizedDataset {
        labels: dataset.labels(),
        shape_inputs,
        value_inputs,
        shape_tokens,
        value_tokens,
        shape_priors,
        value_priors,
    })
}

/// Full-mode token counts: shape k*V*C, value V*3*(1+M)M/2.
pub fn expected_token_counts(
    k: usize,
    n_variables: usize,
    n_classes: usize,
    granularity_max: usize,
) -> (usize, usize) {
    (
        k * n_variables * n_classes,
        value_token_count(n_variables, granularity_max),
    )
}

impl AblationMode {
    /// Gate values reported for single-branch modes.
    pub fn fixed_lambda(self) -> Option<f64> {
        match self {
            AblationMode::ShapeOnly => Some(1.0),
            AblationMode::ValueOnly => Some(0.0),
            _ => None,
        }
    }
}
