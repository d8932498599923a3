//! Training, evaluation, checkpointing, and the attention report.

mod checkpoint;
mod explain;
pub mod metrics;
pub mod pipeline;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, load_checkpoint_bytes, save_checkpoint, CheckpointError,
    ModelCheckpoint,
};
pub use explain::{explain, ExplainEntry, ExplainReport};
pub use metrics::{EpochMetrics, EvalMetrics, MetricsReport};
pub use pipeline::{fit_artifacts, tokenize_dataset, TokenizedDataset, TokenizerArtifacts};

use crate::dataset::{DatasetError, MtsDataset};
use crate::model::{bind_params, model_forward, AblationMode, ModelError, ModelParams, Phase};
use crate::priors::PriorError;
use crate::shape::ShapeError;
use crate::value::ValueError;
use pipeline::model_config;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use vsf_numerics::rng::SplitMix64;
use vsf_numerics::{Adam, NumericsError, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Value(#[from] ValueError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("class vocabulary mismatch: checkpoint has {expected:?}, dataset has {found:?}")]
    VocabularyMismatch {
        expected: Vec<String>,
        found: Vec<String>,
    },
}

fn default_k() -> usize {
    6
}
fn default_granularity() -> usize {
    10
}
fn default_alpha() -> f64 {
    3.0
}
fn default_beta() -> f64 {
    4.0
}
fn default_bins() -> usize {
    10
}
fn default_d_model() -> usize {
    8
}
fn default_d_ff() -> usize {
    64
}
fn default_lr() -> f64 {
    1e-3
}
fn default_batch_size() -> usize {
    8
}
fn default_epochs() -> usize {
    200
}
fn default_patience() -> usize {
    50
}
fn default_layers() -> usize {
    1
}
fn default_mode() -> AblationMode {
    AblationMode::Full
}

/// Run configuration. Every field has a default, so `{}` is a valid config
/// file; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Motif pairs per (variable, class).
    #[serde(default = "default_k")]
    pub k: usize,
    /// Largest interval-granularity level.
    #[serde(default = "default_granularity", rename = "M")]
    pub granularity_max: usize,
    /// Motif length; when absent, max(4, T/10).
    #[serde(default, rename = "m")]
    pub motif_len: Option<usize>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Equal-frequency bins for the feature-importance discretization.
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// Shape-branch encoder width.
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    /// Shape-branch feed-forward width.
    #[serde(default = "default_d_ff")]
    pub d_ff: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Stop after this many epochs without a validation-accuracy improvement.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_layers")]
    pub encoder_layers: usize,
    #[serde(default)]
    pub tsi_stat_kind: bool,
    #[serde(default = "default_mode")]
    pub mode: AblationMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let mut problems = Vec::new();
        if self.k == 0 {
            problems.push("k must be positive".to_string());
        }
        if self.granularity_max == 0 {
            problems.push("M must be positive".to_string());
        }
        if self.motif_len == Some(0) {
            problems.push("m must be positive".to_string());
        }
        if self.alpha < 0.0 {
            problems.push("alpha must be nonnegative".to_string());
        }
        if self.beta < 0.0 {
            problems.push("beta must be nonnegative".to_string());
        }
        if self.bins < 2 {
            problems.push("bins must be at least 2".to_string());
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(crate::model::N_HEADS) {
            problems.push(format!(
                "d_model must be a positive multiple of {}",
                crate::model::N_HEADS
            ));
        }
        if self.d_ff == 0 {
            problems.push("d_ff must be positive".to_string());
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            problems.push("lr must be positive and finite".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if self.epochs == 0 {
            problems.push("epochs must be positive".to_string());
        }
        if self.encoder_layers == 0 {
            problems.push("encoder_layers must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(problems.join("; ")))
        }
    }

    pub fn motif_len_for(&self, series_len: usize) -> usize {
        self.motif_len.unwrap_or((series_len / 10).max(4))
    }
}

fn check_splits_compatible(a: &MtsDataset, b: &MtsDataset) -> Result<(), TrainError> {
    if a.class_names() != b.class_names() {
        return Err(TrainError::VocabularyMismatch {
            expected: a.class_names().to_vec(),
            found: b.class_names().to_vec(),
        });
    }
    if a.n_variables() != b.n_variables() || a.series_len() != b.series_len() {
        return Err(TrainError::Config(format!(
            "splits disagree on shape: {}x{} vs {}x{}",
            a.n_variables(),
            a.series_len(),
            b.n_variables(),
            b.series_len()
        )));
    }
    Ok(())
}

pub(crate) fn check_dataset_compatible(
    cp: &ModelCheckpoint,
    dataset: &MtsDataset,
) -> Result<(), TrainError> {
    if cp.class_names != dataset.class_names() {
        return Err(TrainError::VocabularyMismatch {
            expected: cp.class_names.clone(),
            found: dataset.class_names().to_vec(),
        });
    }
    if cp.n_variables != dataset.n_variables() || cp.series_len != dataset.series_len() {
        return Err(TrainError::Config(format!(
            "checkpoint was trained on {}x{} series, dataset is {}x{}",
            cp.n_variables,
            cp.series_len,
            dataset.n_variables(),
            dataset.series_len()
        )));
    }
    Ok(())
}

/// Treat a mid-training numeric blowup as divergence, keep real errors as is.
fn batch_error(e: TrainError, epoch: usize) -> TrainError {
    match e {
        TrainError::Numerics(NumericsError::NonFinite { .. })
        | TrainError::Model(ModelError::Numerics(NumericsError::NonFinite { .. })) => {
            TrainError::Diverged { epoch }
        }
        other => other,
    }
}

struct EvalPass {
    loss: f64,
    accuracy: f64,
    probabilities: Vec<Vec<f64>>,
    lambdas: Vec<f64>,
}

fn eval_pass(
    params: &ModelParams,
    tokenized: &TokenizedDataset,
    batch_size: usize,
) -> Result<EvalPass, TrainError> {
    let n = tokenized.len();
    let mut probabilities = Vec::with_capacity(n);
    let mut lambdas = Vec::with_capacity(n);
    let order: Vec<usize> = (0..n).collect();
    for chunk in order.chunks(batch_size) {
        let inputs = tokenized.gather(chunk);
        let mut g = vsf_numerics::Graph::new();
        let bound = bind_params(&mut g, params)?;
        let out = model_forward(&mut g, params, &bound, &inputs, Phase::Eval, false)?;
        let probs = g.value(out.probs);
        for row in 0..chunk.len() {
            probabilities.push(probs.row_slice(row).to_vec());
        }
        lambdas.extend(out.lambdas);
    }
    let labels = &tokenized.labels;
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(n);
    for (row, &label) in probabilities.iter().zip(labels) {
        loss -= row[label].max(1e-12).ln();
        predictions.push(metrics::argmax(row));
    }
    Ok(EvalPass {
        loss: loss / n as f64,
        accuracy: metrics::accuracy(&predictions, labels),
        probabilities,
        lambdas,
    })
}

/// Fit artifacts and priors on the training split, then train with Adam and
/// cross-entropy, snapshotting the parameters with the best validation
/// accuracy (earliest epoch on ties). Deterministic under (config, data).
pub fn train(
    config: &TrainConfig,
    train_set: &MtsDataset,
    val_set: &MtsDataset,
) -> Result<(ModelCheckpoint, MetricsReport), TrainError> {
    train_with_progress(config, train_set, val_set, |_| {})
}

pub fn train_with_progress(
    config: &TrainConfig,
    train_set: &MtsDataset,
    val_set: &MtsDataset,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(ModelCheckpoint, MetricsReport), TrainError> {
    config.validate()?;
    check_splits_compatible(train_set, val_set)?;

    let artifacts = fit_artifacts(train_set, config)?;
    let mcfg = model_config(&artifacts, config, train_set);
    if mcfg.mode.uses_shape_branch() && mcfg.n_shape_tokens == 0 {
        return Err(TrainError::Config(
            "no prototypes were discovered; the shape branch has no tokens".into(),
        ));
    }
    let tokenized_train = tokenize_dataset(train_set, &artifacts, &mcfg)?;
    let tokenized_val = tokenize_dataset(val_set, &artifacts, &mcfg)?;

    let mut params = ModelParams::init(mcfg, config.seed);
    let mut adam = Adam::new(config.lr);
    let mut shuffle_rng = SplitMix64::new(config.seed ^ 0x5DEE_CE66_D5A5_A5A5);

    let n_train = tokenized_train.len();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        shuffle_rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let (batch_loss, batch_correct) =
                train_batch(&mut params, &mut adam, &tokenized_train, chunk)
                    .map_err(|e| batch_error(e, epoch))?;
            loss_sum += batch_loss * chunk.len() as f64;
            correct += batch_correct;
        }

        let val = eval_pass(&params, &tokenized_val, config.batch_size)?;
        let entry = EpochMetrics {
            epoch,
            train_loss: loss_sum / n_train as f64,
            train_accuracy: correct as f64 / n_train as f64,
            val_loss: val.loss,
            val_accuracy: val.accuracy,
        };
        on_epoch(&entry);
        epochs.push(entry);

        let improved = best
            .as_ref()
            .is_none_or(|(acc, _, _)| val.accuracy > *acc);
        if improved {
            best = Some((val.accuracy, epoch, params.clone()));
        }
        let best_epoch = best.as_ref().map(|(_, e, _)| *e).unwrap_or(0);
        if epoch - best_epoch >= config.patience {
            break;
        }
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch ran");
    let checkpoint = ModelCheckpoint {
        config: config.clone(),
        class_names: train_set.class_names().to_vec(),
        n_variables: train_set.n_variables(),
        series_len: train_set.series_len(),
        artifacts,
        params: best_params,
    };
    let report = MetricsReport {
        epochs,
        best_epoch,
        test: None,
    };
    Ok((checkpoint, report))
}

fn train_batch(
    params: &mut ModelParams,
    adam: &mut Adam,
    tokenized: &TokenizedDataset,
    indices: &[usize],
) -> Result<(f64, usize), TrainError> {
    let inputs = tokenized.gather(indices);
    let labels = tokenized.gather_labels(indices);

    let mut g = vsf_numerics::Graph::new();
    let bound = bind_params(&mut g, params)?;
    let out = model_forward(&mut g, params, &bound, &inputs, Phase::Train, false)?;

    let probs = g.value(out.probs).clone();
    let loss_node = g.cross_entropy(out.probs, &labels)?;
    let loss = g.value(loss_node).scalar_value();
    g.backward(loss_node)?;

    let grads: Vec<&Tensor> = bound
        .ordered
        .iter()
        .map(|&id| g.grad(id).expect("every bound leaf is trainable"))
        .collect();
    let mut named = params.named_tensors_mut();
    let mut slots: Vec<&mut Tensor> = named.iter_mut().map(|(_, t)| &mut **t).collect();
    adam.step(&mut slots, &grads)?;
    drop(named);

    let mut states = params.bn_states_mut();
    assert_eq!(
        states.len(),
        out.bn_nodes.len(),
        "batch-norm nodes must line up with the running statistics"
    );
    for ((_, state), &node) in states.iter_mut().zip(&out.bn_nodes) {
        let (mean, var) = g.batch_stats(node).expect("train-phase batch norm node");
        state.update(mean, var);
    }
    drop(states);

    let correct = labels
        .iter()
        .enumerate()
        .filter(|(row, &label)| metrics::argmax(probs.row_slice(*row)) == label)
        .count();
    Ok((loss, correct))
}

/// Evaluate a checkpoint on a labeled dataset: accuracy, macro one-vs-rest
/// AUC, and the per-instance gate values.
pub fn evaluate(cp: &ModelCheckpoint, dataset: &MtsDataset) -> Result<EvalMetrics, TrainError> {
    check_dataset_compatible(cp, dataset)?;
    if dataset.is_empty() {
        return Err(TrainError::Config("cannot evaluate an empty dataset".into()));
    }
    let mcfg = model_config(&cp.artifacts, &cp.config, dataset);
    let tokenized = tokenize_dataset(dataset, &cp.artifacts, &mcfg)?;
    let pass = eval_pass(&cp.params, &tokenized, cp.config.batch_size)?;
    let lambdas = match cp.params.config.mode.fixed_lambda() {
        Some(fixed) => vec![fixed; dataset.len()],
        None => pass.lambdas,
    };
    let mean_lambda = lambdas.iter().sum::<f64>() / lambdas.len() as f64;
    Ok(EvalMetrics {
        loss: pass.loss,
        accuracy: pass.accuracy,
        auc_macro: metrics::macro_ovr_auc(
            &pass.probabilities,
            &tokenized.labels,
            dataset.n_classes(),
        ),
        mean_lambda,
        lambdas,
    })
}

/// Class-probability rows for every instance, in dataset order.
pub fn predict(cp: &ModelCheckpoint, dataset: &MtsDataset) -> Result<Vec<Vec<f64>>, TrainError> {
    check_dataset_compatible(cp, dataset)?;
    let mcfg = model_config(&cp.artifacts, &cp.config, dataset);
    let tokenized = tokenize_dataset(dataset, &cp.artifacts, &mcfg)?;
    Ok(eval_pass(&cp.params, &tokenized, cp.config.batch_size)?.probabilities)
}

/// Train, then fill the report's test metrics if a test set is given.
pub fn train_and_evaluate(
    config: &TrainConfig,
    train_set: &MtsDataset,
    val_set: &MtsDataset,
    test_set: Option<&MtsDataset>,
) -> Result<(ModelCheckpoint, MetricsReport), TrainError> {
    let (cp, mut report) = train(config, train_set, val_set)?;
    if let Some(test) = test_set {
        report.test = Some(evaluate(&cp, test)?);
    }
    Ok((cp, report))
}
