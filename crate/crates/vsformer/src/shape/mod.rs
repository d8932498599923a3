//! Shape tokens: per-class, per-variable prototype subsequences discovered by
//! matrix-profile motif search over class-concatenated series, then matched
//! into every instance by z-normalized similarity search.

mod profile;

pub use profile::{matrix_profile, znorm_distance, znormalize, MatrixProfile};

use crate::dataset::MtsDataset;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ShapeError {
    #[error("window length {m} exceeds series length {len}")]
    WindowTooLong { m: usize, len: usize },
    #[error("series of length {len} is too short for two length-{m} windows")]
    SeriesTooShort { len: usize, m: usize },
    #[error("length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("no valid, non-mutually-excluded window pair")]
    NoValidPair,
    #[error("class {class} has no instances to discover prototypes from")]
    EmptyClass { class: usize },
}

/// A prototype shape: one member of a top-k motif pair for a (variable,
/// class) slot, taken from the class-concatenated series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub variable: usize,
    pub class: usize,
    /// Which of the top-k pairs this came from, 0-based.
    pub rank: usize,
    pub values: Vec<f64>,
    /// Start position within the concatenated series it was cut from.
    pub source_position: usize,
}

/// An instance's best match against one prototype.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeToken {
    /// Index into the prototype list.
    pub prototype: usize,
    pub values: Vec<f64>,
    /// Z-normalized Euclidean distance to the prototype.
    pub distance: f64,
    pub t_start: usize,
    pub t_end: usize,
    pub variable: usize,
}

/// Exclusion radius used both for trivial-match suppression inside the
/// profile and for the zones carved around selected motif members.
pub fn exclusion_zone(m: usize) -> usize {
    m.div_ceil(2)
}

/// Top-k motif pairs of a concatenated series, skipping windows that straddle
/// instance joints. Each selection invalidates an exclusion zone around both
/// pair members; the prototype is the lower-index member. Returns fewer than
/// k prototypes when the series runs out of valid pairs.
pub fn top_k_motifs(
    concatenated: &[f64],
    boundaries: &[usize],
    k: usize,
    m: usize,
    variable: usize,
    class: usize,
) -> Result<Vec<Prototype>, ShapeError> {
    if m == 0 || concatenated.len() < 2 * m {
        return Err(ShapeError::SeriesTooShort {
            len: concatenated.len(),
            m,
        });
    }
    let n = concatenated.len() - m + 1;
    let zone = exclusion_zone(m);
    let mut mask = vec![true; n];
    for (s, valid) in mask.iter_mut().enumerate() {
        if boundaries.iter().any(|&b| s < b && b < s + m) {
            *valid = false;
        }
    }

    let mut prototypes = Vec::with_capacity(k);
    for rank in 0..k {
        let mp = match matrix_profile(concatenated, m, zone, &mask) {
            Ok(mp) => mp,
            Err(ShapeError::NoValidPair) if rank > 0 => break,
            Err(e) => return Err(e),
        };
        let best = (0..n)
            .filter(|&i| mp.distances[i].is_finite())
            .min_by(|&a, &b| {
                mp.distances[a]
                    .partial_cmp(&mp.distances[b])
                    .expect("finite distances")
                    .then(a.cmp(&b))
            });
        let Some(i) = best else { break };
        let j = mp.indices[i].expect("finite profile entries carry a neighbor");
        let position = i.min(j);
        prototypes.push(Prototype {
            variable,
            class,
            rank,
            values: concatenated[position..position + m].to_vec(),
            source_position: position,
        });
        for member in [i, j] {
            let lo = member.saturating_sub(zone - 1);
            let hi = (member + zone - 1).min(n - 1);
            for slot in mask[lo..=hi].iter_mut() {
                *slot = false;
            }
        }
    }
    Ok(prototypes)
}

/// Discover prototypes for every (variable, class) slot from a training set:
/// concatenate the class's instances per variable and search for top-k motif
/// pairs. Output is ordered by (variable, class, rank).
pub fn discover_prototypes(
    train: &MtsDataset,
    k: usize,
    m: usize,
) -> Result<Vec<Prototype>, ShapeError> {
    let mut prototypes = Vec::new();
    for variable in 0..train.n_variables() {
        for class in 0..train.n_classes() {
            let members: Vec<&Vec<f64>> = train
                .instances()
                .iter()
                .filter(|inst| inst.label == class)
                .map(|inst| &inst.values[variable])
                .collect();
            if members.is_empty() {
                return Err(ShapeError::EmptyClass { class });
            }
            let mut concatenated = Vec::with_capacity(members.len() * train.series_len());
            let mut boundaries = Vec::new();
            for series in &members {
                if !concatenated.is_empty() {
                    boundaries.push(concatenated.len());
                }
                concatenated.extend_from_slice(series);
            }
            prototypes.extend(top_k_motifs(
                &concatenated,
                &boundaries,
                k,
                m,
                variable,
                class,
            )?);
        }
    }
    Ok(prototypes)
}

/// Best z-normalized match of `prototype` within one variable of an instance,
/// ties broken by the smallest start. Each window is normalized explicitly
/// against the pre-normalized prototype; the identity-based shortcut loses
/// too much precision exactly where it matters, near distance zero.
pub fn nearest_subsequence(
    series: &[f64],
    prototype: &Prototype,
    prototype_id: usize,
) -> Result<ShapeToken, ShapeError> {
    let m = prototype.values.len();
    if series.len() < m {
        return Err(ShapeError::WindowTooLong {
            m,
            len: series.len(),
        });
    }
    let pz = znormalize(&prototype.values);

    let mut best = f64::INFINITY;
    let mut best_start = 0;
    for start in 0..=(series.len() - m) {
        let wz = znormalize(&series[start..start + m]);
        let mut sum = 0.0;
        for (w, p) in wz.iter().zip(&pz) {
            let d = w - p;
            sum += d * d;
        }
        let d = sum.sqrt();
        if d < best {
            best = d;
            best_start = start;
        }
    }

    Ok(ShapeToken {
        prototype: prototype_id,
        values: series[best_start..best_start + m].to_vec(),
        distance: best,
        t_start: best_start,
        t_end: best_start + m,
        variable: prototype.variable,
    })
}

/// Match every instance against every prototype. Tokens follow the prototype
/// order, so each instance gets exactly `prototypes.len()` tokens.
pub fn build_shape_tokens(
    dataset: &MtsDataset,
    prototypes: &[Prototype],
) -> Result<Vec<Vec<ShapeToken>>, ShapeError> {
    dataset
        .instances()
        .iter()
        .map(|inst| {
            prototypes
                .iter()
                .enumerate()
                .map(|(id, proto)| nearest_subsequence(&inst.values[proto.variable], proto, id))
                .collect()
        })
        .collect()
}
