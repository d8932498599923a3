//! Evaluation metrics: argmax accuracy and macro one-vs-rest AUC computed by
//! the rank statistic (ties get midranks, so a constant scorer lands at 0.5).

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub auc_macro: f64,
    pub mean_lambda: f64,
    pub lambdas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub test: Option<EvalMetrics>,
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(predictions.len(), labels.len());
    if labels.is_empty() {
        return 0.0;
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    correct as f64 / labels.len() as f64
}

/// One-vs-rest AUC for a single class via the Mann-Whitney rank statistic.
/// Returns None when the class has no positives or no negatives.
fn binary_auc(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // midranks over tied score runs
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = midrank;
        }
        i = j + 1;
    }

    let rank_sum: f64 = positives
        .iter()
        .zip(&ranks)
        .filter(|(&p, _)| p)
        .map(|(_, &r)| r)
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Macro average of per-class one-vs-rest AUCs over classes that have both
/// positives and negatives; 0.5 when no class qualifies.
pub fn macro_ovr_auc(probabilities: &[Vec<f64>], labels: &[usize], n_classes: usize) -> f64 {
    let mut total = 0.0;
    let mut counted = 0;
    for class in 0..n_classes {
        let scores: Vec<f64> = probabilities.iter().map(|p| p[class]).collect();
        let positives: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        if let Some(auc) = binary_auc(&scores, &positives) {
            total += auc;
            counted += 1;
        }
    }
    if counted == 0 {
        0.5
    } else {
        total / counted as f64
    }
}
