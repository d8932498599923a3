//! Class-specific prior information, learned on training data and frozen:
//! distance-ratio weights for shape tokens and entropy-gain feature
//! importance for value tokens.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("prototype of class {class} has no {which} distances")]
    EmptyDistanceGroup { which: &'static str, class: usize },
    #[error("distance must be nonnegative, got {0}")]
    NegativeDistance(f64),
    #[error("weighting parameter must be nonnegative, got {0}")]
    NegativeParameter(f64),
    #[error("feature importance needs at least 2 instances, got {0}")]
    TooFewInstances(usize),
    #[error("feature importance needs at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error("{values} values for {labels} labels")]
    LengthMismatch { values: usize, labels: usize },
}

/// How discriminative a prototype shape is: the inter/intra distance ratio
/// and the exponential weight derived from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeWeight {
    pub prototype: usize,
    /// Mean distance from same-class training instances.
    pub intra_class: f64,
    /// Mean distance from other-class training instances.
    pub inter_class: f64,
    /// inter / (intra + inter), in [0, 1]; 0.5 when both means vanish.
    pub ratio: f64,
    /// exp(alpha * max(ratio - 0.5, 0)) >= 1.
    pub weight: f64,
}

/// Weight for one prototype from every training instance's match distance.
/// `labels[i]` is the class of the instance that produced `distances[i]`.
pub fn prototype_weight(
    prototype: usize,
    distances: &[f64],
    labels: &[usize],
    class: usize,
    alpha: f64,
) -> Result<PrototypeWeight, PriorError> {
    if alpha < 0.0 {
        return Err(PriorError::NegativeParameter(alpha));
    }
    if distances.len() != labels.len() {
        return Err(PriorError::LengthMismatch {
            values: distances.len(),
            labels: labels.len(),
        });
    }
    let mut intra = (0.0, 0usize);
    let mut inter = (0.0, 0usize);
    for (&d, &l) in distances.iter().zip(labels) {
        if d < 0.0 {
            return Err(PriorError::NegativeDistance(d));
        }
        if l == class {
            intra = (intra.0 + d, intra.1 + 1);
        } else {
            inter = (inter.0 + d, inter.1 + 1);
        }
    }
    if intra.1 == 0 {
        return Err(PriorError::EmptyDistanceGroup {
            which: "intra-class",
            class,
        });
    }
    if inter.1 == 0 {
        return Err(PriorError::EmptyDistanceGroup {
            which: "inter-class",
            class,
        });
    }
    let intra_class = intra.0 / intra.1 as f64;
    let inter_class = inter.0 / inter.1 as f64;
    let total = intra_class + inter_class;
    // both means zero: the prototype separates nothing, treat as neutral
    let ratio = if total == 0.0 {
        0.5
    } else {
        inter_class / total
    };
    let weight = (alpha * (ratio - 0.5).max(0.0)).exp();
    Ok(PrototypeWeight {
        prototype,
        intra_class,
        inter_class,
        ratio,
        weight,
    })
}

/// Per-token weight `beta * exp(-d) + 1`: strictly decreasing in the match
/// distance, in (1, beta + 1].
pub fn shape_token_weight(distance: f64, beta: f64) -> Result<f64, PriorError> {
    if distance < 0.0 {
        return Err(PriorError::NegativeDistance(distance));
    }
    if beta < 0.0 {
        return Err(PriorError::NegativeParameter(beta));
    }
    Ok(beta * (-distance).exp() + 1.0)
}

/// A shape token's prior: prototype weight times token weight.
pub fn shape_prior(prototype_weight: f64, token_weight: f64) -> f64 {
    prototype_weight * token_weight
}

/// Equal-frequency discretization of one value-token position plus the
/// information gain its bins carry about the class label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    /// Nondecreasing thresholds at training quantiles, duplicates merged.
    pub bin_edges: Vec<f64>,
    /// Training co-occurrence counts, indexed [bin][class].
    pub bin_class_counts: Vec<Vec<usize>>,
    /// H(A) - H(A|Y) in bits, in [0, log2 C].
    pub importance: f64,
}

impl FeatureImportance {
    /// Bin index for a value; out-of-range values clamp into the edge bins.
    pub fn bin_of(&self, value: f64) -> usize {
        self.bin_edges.partition_point(|&e| e < value)
    }
}

/// Fit the discretization and information gain for one token position over
/// the training set.
pub fn fit_feature_importance(
    values: &[f64],
    labels: &[usize],
    n_classes: usize,
    bins: usize,
) -> Result<FeatureImportance, PriorError> {
    let n = values.len();
    if n < 2 {
        return Err(PriorError::TooFewInstances(n));
    }
    if bins < 2 {
        return Err(PriorError::TooFewBins(bins));
    }
    if labels.len() != n {
        return Err(PriorError::LengthMismatch {
            values: n,
            labels: labels.len(),
        });
    }

    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite token values"));
    let mut bin_edges = Vec::with_capacity(bins - 1);
    for i in 1..bins {
        let pos = (i * n).div_ceil(bins) - 1;
        let edge = sorted[pos];
        if bin_edges.last() != Some(&edge) {
            bin_edges.push(edge);
        }
    }

    let n_bins = bin_edges.len() + 1;
    let mut bin_class_counts = vec![vec![0usize; n_classes]; n_bins];
    for (&v, &l) in values.iter().zip(labels) {
        let bin = bin_edges.partition_point(|&e| e < v);
        bin_class_counts[bin][l] += 1;
    }

    let importance = information_gain(&bin_class_counts, n);
    Ok(FeatureImportance {
        bin_edges,
        bin_class_counts,
        importance,
    })
}

/// H(A) - H(A|Y) from a contingency table, with 0 log 0 := 0.
fn information_gain(counts: &[Vec<usize>], total: usize) -> f64 {
    let nf = total as f64;
    let n_classes = counts.first().map_or(0, |row| row.len());

    let h_bins: f64 = counts
        .iter()
        .map(|row| {
            let nb: usize = row.iter().sum();
            entropy_term(nb as f64 / nf)
        })
        .sum();

    let mut h_given_class = 0.0;
    for class in 0..n_classes {
        let n_class: usize = counts.iter().map(|row| row[class]).sum();
        if n_class == 0 {
            continue;
        }
        let h_class: f64 = counts
            .iter()
            .map(|row| entropy_term(row[class] as f64 / n_class as f64))
            .sum();
        h_given_class += (n_class as f64 / nf) * h_class;
    }
    (h_bins - h_given_class).max(0.0)
}

fn entropy_term(p: f64) -> f64 {
    if p > 0.0 {
        -p * p.log2()
    } else {
        0.0
    }
}
