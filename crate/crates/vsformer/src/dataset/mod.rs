//! Multivariate time-series corpora: UEA `.ts` ingestion, synthetic corpus
//! generation with controlled shape/value discriminability, splits, and
//! normalization. Datasets are immutable after construction.

mod ts_format;

pub use ts_format::{parse_ts, parse_ts_str, to_ts_string, write_ts};

use thiserror::Error;
use vsf_numerics::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed header: {detail}")]
    MalformedHeader { line: usize, detail: String },
    #[error("class labels are required (@classLabel true <labels...>)")]
    ClassLabelRequired,
    #[error("line {line}: label {label:?} not in the declared vocabulary")]
    UnknownLabel { line: usize, label: String },
    #[error("line {line}: expected {expected} dimensions, found {found}")]
    DimensionCount {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: series length {found} differs from declared {expected}")]
    UnequalLength {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: cannot parse value {token:?}")]
    BadValue { line: usize, token: String },
    #[error("line {line}: dimension {dimension} has no observed values")]
    AllMissing { line: usize, dimension: usize },
    #[error("no instances after @data")]
    EmptyData,
    #[error("instances disagree on shape: {0}")]
    Inconsistent(String),
    #[error("validation fraction {0} must lie strictly between 0 and 1")]
    InvalidFraction(f64),
    #[error("split would leave one side empty")]
    EmptySplit,
    #[error("invalid synthetic corpus parameters: {0}")]
    InvalidSynthetic(String),
}

/// One labeled instance: V variables, each a length-T series.
#[derive(Clone, Debug, PartialEq)]
pub struct MtsInstance {
    pub values: Vec<Vec<f64>>,
    pub label: usize,
}

/// A labeled collection of equal-length multivariate series.
#[derive(Clone, Debug, PartialEq)]
pub struct MtsDataset {
    instances: Vec<MtsInstance>,
    class_names: Vec<String>,
    n_variables: usize,
    series_len: usize,
}

impl MtsDataset {
    pub fn new(instances: Vec<MtsInstance>, class_names: Vec<String>) -> Result<Self, DatasetError> {
        if instances.is_empty() {
            return Err(DatasetError::EmptyData);
        }
        let n_variables = instances[0].values.len();
        let series_len = instances[0].values[0].len();
        for (i, inst) in instances.iter().enumerate() {
            if inst.values.len() != n_variables {
                return Err(DatasetError::Inconsistent(format!(
                    "instance {i} has {} variables, expected {n_variables}",
                    inst.values.len()
                )));
            }
            if inst.values.iter().any(|s| s.len() != series_len) {
                return Err(DatasetError::Inconsistent(format!(
                    "instance {i} has a series length other than {series_len}"
                )));
            }
            if inst.label >= class_names.len() {
                return Err(DatasetError::Inconsistent(format!(
                    "instance {i} has label {} but only {} classes are declared",
                    inst.label,
                    class_names.len()
                )));
            }
        }
        Ok(MtsDataset {
            instances,
            class_names,
            n_variables,
            series_len,
        })
    }

    pub fn instances(&self) -> &[MtsInstance] {
        &self.instances
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Number of instances (N).
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Number of variables (V).
    pub fn n_variables(&self) -> usize {
        self.n_variables
    }

    /// Series length (T).
    pub fn series_len(&self) -> usize {
        self.series_len
    }

    /// Number of classes (C).
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.label).collect()
    }

    /// A new dataset holding clones of the selected instances, in the given
    /// order, with the same class vocabulary.
    pub fn subset(&self, indices: &[usize]) -> MtsDataset {
        MtsDataset {
            instances: indices.iter().map(|&i| self.instances[i].clone()).collect(),
            class_names: self.class_names.clone(),
            n_variables: self.n_variables,
            series_len: self.series_len,
        }
    }
}

/// Stratified train/validation split. `fraction` is the validation share.
/// Deterministic under `seed`; classes with a single instance stay in train.
pub fn split_train_val(
    dataset: &MtsDataset,
    fraction: f64,
    seed: u64,
) -> Result<(MtsDataset, MtsDataset), DatasetError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DatasetError::InvalidFraction(fraction));
    }
    let mut rng = SplitMix64::new(seed);
    let mut val_indices = Vec::new();
    let mut train_indices = Vec::new();
    for class in 0..dataset.n_classes() {
        let mut members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.instances[i].label == class)
            .collect();
        if members.is_empty() {
            continue;
        }
        rng.shuffle(&mut members);
        let n_val = if members.len() == 1 {
            0
        } else {
            (((members.len() as f64) * fraction).round() as usize).min(members.len() - 1)
        };
        val_indices.extend_from_slice(&members[..n_val]);
        train_indices.extend_from_slice(&members[n_val..]);
    }
    if train_indices.is_empty() || val_indices.is_empty() {
        return Err(DatasetError::EmptySplit);
    }
    train_indices.sort_unstable();
    val_indices.sort_unstable();
    Ok((dataset.subset(&train_indices), dataset.subset(&val_indices)))
}

/// Per-variable global min-max normalization to [0, 1]. Constant variables
/// map to 0.
pub fn minmax_normalize(dataset: &MtsDataset) -> MtsDataset {
    let v = dataset.n_variables();
    let mut lo = vec![f64::INFINITY; v];
    let mut hi = vec![f64::NEG_INFINITY; v];
    for inst in &dataset.instances {
        for (var, series) in inst.values.iter().enumerate() {
            for &x in series {
                lo[var] = lo[var].min(x);
                hi[var] = hi[var].max(x);
            }
        }
    }
    let instances = dataset
        .instances
        .iter()
        .map(|inst| MtsInstance {
            values: inst
                .values
                .iter()
                .enumerate()
                .map(|(var, series)| {
                    let range = hi[var] - lo[var];
                    series
                        .iter()
                        .map(|&x| if range == 0.0 { 0.0 } else { (x - lo[var]) / range })
                        .collect()
                })
                .collect(),
            label: inst.label,
        })
        .collect();
    MtsDataset {
        instances,
        class_names: dataset.class_names.clone(),
        n_variables: dataset.n_variables,
        series_len: dataset.series_len,
    }
}

/// What a synthetic corpus discriminates on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Classes share amplitude statistics but each embeds a class-specific
    /// smooth template subsequence at a random offset into unit noise.
    Shape,
    /// Classes are pure noise whose amplitude scales differ by an order of
    /// magnitude per class step.
    Value,
    /// Half the variables carry the shape signal, half the value signal.
    Mixed,
}

impl std::str::FromStr for SyntheticKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "shape" => Ok(SyntheticKind::Shape),
            "value" => Ok(SyntheticKind::Value),
            "mixed" => Ok(SyntheticKind::Mixed),
            other => Err(format!("unknown synthetic kind {other:?} (shape|value|mixed)")),
        }
    }
}

const TEMPLATE_AMPLITUDE: f64 = 1.5;

/// Class templates are fixed-frequency sinusoid mixtures of length T/8;
/// frequency grows with the class index so templates stay distinguishable
/// while all classes share the same amplitude statistics.
fn class_template(rng: &mut SplitMix64, class: usize, len: usize) -> Vec<f64> {
    let phase1 = rng.uniform(0.0, std::f64::consts::TAU);
    let phase2 = rng.uniform(0.0, std::f64::consts::TAU);
    let freq = (class + 1) as f64;
    (0..len)
        .map(|i| {
            let t = i as f64 / len as f64;
            TEMPLATE_AMPLITUDE
                * ((std::f64::consts::TAU * freq * t + phase1).sin()
                    + 0.3 * (std::f64::consts::TAU * 2.0 * freq * t + phase2).sin())
        })
        .collect()
}

/// Generate a balanced synthetic corpus. Deterministic under `seed`.
#[allow(clippy::needless_range_loop)]
pub fn gen_synthetic(
    kind: SyntheticKind,
    n_per_class: usize,
    n_variables: usize,
    series_len: usize,
    n_classes: usize,
    seed: u64,
) -> Result<MtsDataset, DatasetError> {
    if series_len < 32 {
        return Err(DatasetError::InvalidSynthetic(format!(
            "series length {series_len} < 32"
        )));
    }
    if n_per_class == 0 || n_variables == 0 || n_classes < 2 {
        return Err(DatasetError::InvalidSynthetic(
            "need n_per_class >= 1, vars >= 1, classes >= 2".into(),
        ));
    }
    if kind == SyntheticKind::Mixed && n_variables < 2 {
        return Err(DatasetError::InvalidSynthetic(
            "mixed corpora need at least 2 variables".into(),
        ));
    }

    let template_len = series_len / 8;
    let shape_vars = match kind {
        SyntheticKind::Shape => n_variables,
        SyntheticKind::Value => 0,
        SyntheticKind::Mixed => n_variables.div_ceil(2),
    };

    let mut rng = SplitMix64::new(seed);
    // Templates first so instance noise does not disturb their seeds.
    let mut templates = Vec::with_capacity(n_classes);
    for class in 0..n_classes {
        let per_var: Vec<Vec<f64>> = (0..shape_vars)
            .map(|_| class_template(&mut rng, class, template_len))
            .collect();
        templates.push(per_var);
    }

    let mut instances = Vec::with_capacity(n_classes * n_per_class);
    for class in 0..n_classes {
        let value_scale = 10f64.powi(class as i32);
        for _ in 0..n_per_class {
            let mut values = Vec::with_capacity(n_variables);
            for var in 0..n_variables {
                let series: Vec<f64> = if var < shape_vars {
                    let mut s: Vec<f64> = (0..series_len).map(|_| rng.normal()).collect();
                    let offset = rng.below(series_len - template_len + 1);
                    for (i, &tv) in templates[class][var].iter().enumerate() {
                        s[offset + i] = tv + 0.1 * rng.normal();
                    }
                    s
                } else {
                    (0..series_len).map(|_| value_scale * rng.normal()).collect()
                };
                values.push(series);
            }
            instances.push(MtsInstance {
                values,
                label: class,
            });
        }
    }
    let class_names = (0..n_classes).map(|c| format!("c{c}")).collect();
    MtsDataset::new(instances, class_names)
}
