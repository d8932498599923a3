//! Z-normalized Euclidean distance and the STOMP matrix profile.
//!
//! STOMP keeps the O(L^2) all-pairs structure but replaces the O(m) distance
//! per pair with an O(1) update: window means and variances come from rolling
//! sums, and the sliding dot product QT(i, j) is advanced diagonally via
//! `QT(i, j) = QT(i-1, j-1) - x[i-1] x[j-1] + x[i+m-1] x[j+m-1]`.

use super::ShapeError;

/// Distances below this are recomputed with explicit z-normalization.
const REFINE_BELOW: f64 = 1e-3;

/// Euclidean distance between z-normalized copies of `a` and `b`. A constant
/// subsequence z-normalizes to the all-zero vector, so two constants are at
/// distance 0 and a constant against a non-constant is at sqrt(m).
pub fn znorm_distance(a: &[f64], b: &[f64]) -> Result<f64, ShapeError> {
    if a.len() != b.len() {
        return Err(ShapeError::LengthMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    let za = znormalize(a);
    let zb = znormalize(b);
    let mut sum = 0.0;
    for (x, y) in za.iter().zip(&zb) {
        let d = x - y;
        sum += d * d;
    }
    Ok(sum.sqrt())
}

/// (x - mean) / std with population std; constant input maps to all zeros.
pub fn znormalize(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= 0.0 {
        return vec![0.0; x.len()];
    }
    let std = var.sqrt();
    x.iter().map(|v| (v - mean) / std).collect()
}

#[derive(Clone, Debug)]
pub struct MatrixProfile {
    /// Distance to the nearest valid, non-excluded neighbor; +inf for masked
    /// or partnerless starts.
    pub distances: Vec<f64>,
    /// Position of that neighbor (smallest index on ties).
    pub indices: Vec<Option<usize>>,
}

/// Rolling mean and population standard deviation of every length-m window.
fn window_stats(x: &[f64], m: usize) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() - m + 1;
    let mut cum = vec![0.0; x.len() + 1];
    let mut cum_sq = vec![0.0; x.len() + 1];
    for (i, &v) in x.iter().enumerate() {
        cum[i + 1] = cum[i] + v;
        cum_sq[i + 1] = cum_sq[i] + v * v;
    }
    let mut means = Vec::with_capacity(n);
    let mut stds = Vec::with_capacity(n);
    for i in 0..n {
        let mean = (cum[i + m] - cum[i]) / m as f64;
        let var = ((cum_sq[i + m] - cum_sq[i]) / m as f64 - mean * mean).max(0.0);
        means.push(mean);
        stds.push(var.sqrt());
    }
    (means, stds)
}

/// Z-normalized distance from the dot product of two raw windows and their
/// statistics. Handles degenerate (constant) windows explicitly.
fn pair_distance(m: usize, qt: f64, mu_i: f64, mu_j: f64, sd_i: f64, sd_j: f64) -> f64 {
    let mf = m as f64;
    match (sd_i > 0.0, sd_j > 0.0) {
        (true, true) => {
            let corr = (qt - mf * mu_i * mu_j) / (mf * sd_i * sd_j);
            (2.0 * mf * (1.0 - corr)).max(0.0).sqrt()
        }
        (false, false) => 0.0,
        _ => mf.sqrt(),
    }
}

/// Matrix profile of `series` for window length `m`.
///
/// `mask[s]` marks start `s` as a valid window; pairs additionally require
/// `|i - j| >= exclusion`. Masked or partnerless starts get +inf.
pub fn matrix_profile(
    series: &[f64],
    m: usize,
    exclusion: usize,
    mask: &[bool],
) -> Result<MatrixProfile, ShapeError> {
    if m == 0 || m > series.len() {
        return Err(ShapeError::WindowTooLong {
            m,
            len: series.len(),
        });
    }
    if series.len() < 2 * m {
        return Err(ShapeError::SeriesTooShort {
            len: series.len(),
            m,
        });
    }
    let n = series.len() - m + 1;
    assert_eq!(mask.len(), n, "mask must cover every window start");

    // Any mutually non-excluded valid pair at all?
    let valid: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    let has_pair = valid.len() >= 2
        && valid.last().unwrap() - valid.first().unwrap() >= exclusion.max(1);
    if !has_pair {
        return Err(ShapeError::NoValidPair);
    }

    let (means, stds) = window_stats(series, m);

    // First row of sliding dot products, QT(0, j).
    let mut qt_first = vec![0.0; n];
    for (j, slot) in qt_first.iter_mut().enumerate() {
        let mut s = 0.0;
        for t in 0..m {
            s += series[t] * series[j + t];
        }
        *slot = s;
    }

    let mut distances = vec![f64::INFINITY; n];
    let mut indices: Vec<Option<usize>> = vec![None; n];
    let mut qt = qt_first.clone();
    for i in 0..n {
        if i > 0 {
            for j in (1..n).rev() {
                qt[j] = qt[j - 1] - series[i - 1] * series[j - 1]
                    + series[i + m - 1] * series[j + m - 1];
            }
            // QT(i, 0) = QT(0, i) by symmetry of the dot product.
            qt[0] = qt_first[i];
        }
        if !mask[i] {
            continue;
        }
        for (j, &q) in qt.iter().enumerate() {
            if !mask[j] || i.abs_diff(j) < exclusion.max(1) {
                continue;
            }
            let mut d = pair_distance(m, q, means[i], means[j], stds[i], stds[j]);
            // The correlation identity amplifies rounding error near zero
            // (d ~ sqrt(2m * eps)); recompute near-matches exactly.
            if d < REFINE_BELOW {
                d = znorm_distance(&series[i..i + m], &series[j..j + m])
                    .expect("windows share length m");
            }
            if d < distances[i] {
                distances[i] = d;
                indices[i] = Some(j);
            }
        }
    }

    Ok(MatrixProfile { distances, indices })
}
