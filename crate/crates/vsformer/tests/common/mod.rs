//! Shared helpers for the integration suites.

use vsformer::dataset::{gen_synthetic, split_train_val, MtsDataset, SyntheticKind};
use vsformer::trainer::TrainConfig;

/// One corpus split three ways so train, validation, and test share the
/// synthetic class templates (as a real archive's train/test files share
/// their generating process).
pub fn corpus_splits(
    kind: SyntheticKind,
    per_class: usize,
    n_variables: usize,
    series_len: usize,
    n_classes: usize,
    seed: u64,
) -> (MtsDataset, MtsDataset, MtsDataset) {
    let corpus = gen_synthetic(kind, per_class, n_variables, series_len, n_classes, 11).unwrap();
    let (rest, test) = split_train_val(&corpus, 0.25, 1000 + seed).unwrap();
    let (train, val) = split_train_val(&rest, 0.2, seed).unwrap();
    (train, val, test)
}

/// Small-but-capable run configuration used by the synthetic experiments.
pub fn fast_config(seed: u64) -> TrainConfig {
    TrainConfig {
        k: 2,
        granularity_max: 5,
        d_model: 8,
        d_ff: 32,
        lr: 0.005,
        batch_size: 8,
        epochs: 40,
        patience: 15,
        seed,
        ..TrainConfig::default()
    }
}
