//! Acceptance suite. Each test prints one `criterion N PASS/FAIL` line;
//! run with `cargo test -p vsformer --test acceptance -- --nocapture` to see
//! them all.
#![allow(clippy::needless_range_loop)]

mod common;

use common::{corpus_splits, fast_config};
use vsf_numerics::gradcheck::relative_error;
use vsf_numerics::rng::SplitMix64;
use vsf_numerics::{Graph, Tensor};
use vsformer::dataset::{gen_synthetic, parse_ts, split_train_val, MtsDataset, SyntheticKind};
use vsformer::model::{bind_params, model_forward, ModelParams, Phase};
use vsformer::priors::{fit_feature_importance, prototype_weight, shape_token_weight};
use vsformer::shape::{discover_prototypes, matrix_profile};
use vsformer::trainer::pipeline::{model_config, tokenize_dataset};
use vsformer::trainer::{
    checkpoint_bytes, evaluate, fit_artifacts, load_checkpoint_bytes, predict, train,
    train_and_evaluate, TrainConfig,
};
use vsformer::value::{build_value_tokens, value_token_count};

fn criterion(n: usize, description: &str, pass: bool, detail: String) {
    println!(
        "criterion {n} {}: {description} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {n} failed: {description} ({detail})");
}

// ---------------------------------------------------------------------------
// 1. Gradient integrity on the toy configuration.
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_gradient_integrity() {
    let started = std::time::Instant::now();
    // V=2, C=2, T=32, k=1, M=2, d_model=8
    let corpus = gen_synthetic(SyntheticKind::Mixed, 4, 2, 32, 2, 51).unwrap();
    let config = TrainConfig {
        k: 1,
        granularity_max: 2,
        d_model: 8,
        d_ff: 16,
        seed: 53,
        ..TrainConfig::default()
    };
    let artifacts = fit_artifacts(&corpus, &config).unwrap();
    let mcfg = model_config(&artifacts, &config, &corpus);
    let tokenized = tokenize_dataset(&corpus, &artifacts, &mcfg).unwrap();
    let mut params = ModelParams::init(mcfg, 55);
    let batch = [0usize, 5];
    let labels = tokenized.gather_labels(&batch);

    let loss_of = |params: &ModelParams| -> f64 {
        let inputs = tokenized.gather(&batch);
        let mut g = Graph::new();
        let bound = bind_params(&mut g, params).unwrap();
        let out = model_forward(&mut g, params, &bound, &inputs, Phase::Train, false).unwrap();
        let loss = g.cross_entropy(out.probs, &labels).unwrap();
        g.value(loss).scalar_value()
    };

    let inputs = tokenized.gather(&batch);
    let mut g = Graph::new();
    let bound = bind_params(&mut g, &params).unwrap();
    let out = model_forward(&mut g, &params, &bound, &inputs, Phase::Train, false).unwrap();
    let loss = g.cross_entropy(out.probs, &labels).unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = params
        .named_tensors()
        .iter()
        .zip(&bound.ordered)
        .map(|((name, _), &id)| (name.clone(), g.grad(id).unwrap().data().to_vec()))
        .collect();

    let step = 1e-6;
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let mut checked = 0usize;
    for (name, grad) in &analytic {
        for j in 0..grad.len() {
            let original = {
                let mut named = params.named_tensors_mut();
                let slot = named.iter_mut().find(|(n, _)| n == name).unwrap();
                let orig = slot.1.data()[j];
                slot.1.data_mut()[j] = orig + step;
                orig
            };
            let plus = loss_of(&params);
            {
                let mut named = params.named_tensors_mut();
                let slot = named.iter_mut().find(|(n, _)| n == name).unwrap();
                slot.1.data_mut()[j] = original - step;
            }
            let minus = loss_of(&params);
            {
                let mut named = params.named_tensors_mut();
                let slot = named.iter_mut().find(|(n, _)| n == name).unwrap();
                slot.1.data_mut()[j] = original;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(grad[j], numeric);
            if err > worst {
                worst = err;
                worst_at = format!("{name}[{j}]");
            }
            checked += 1;
        }
    }
    criterion(
        1,
        "autodiff matches central finite differences on every parameter",
        worst < 1e-4 && started.elapsed().as_secs() < 60,
        format!(
            "{checked} components, worst rel err {worst:.2e} at {worst_at}, {:.1}s",
            started.elapsed().as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. Matrix profile equals the brute-force all-pairs oracle.
// ---------------------------------------------------------------------------

/// Fully independent oracle: explicit z-normalization, all pairs.
fn oracle_profile(series: &[f64], m: usize, exclusion: usize, mask: &[bool]) -> Vec<f64> {
    let znorm = |w: &[f64]| -> Vec<f64> {
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        if var <= 0.0 {
            return vec![0.0; w.len()];
        }
        let std = var.sqrt();
        w.iter().map(|v| (v - mean) / std).collect()
    };
    let n = series.len() - m + 1;
    let windows: Vec<Vec<f64>> = (0..n).map(|i| znorm(&series[i..i + m])).collect();
    let mut out = vec![f64::INFINITY; n];
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        for j in 0..n {
            if !mask[j] || i.abs_diff(j) < exclusion.max(1) {
                continue;
            }
            let d: f64 = windows[i]
                .iter()
                .zip(&windows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if d < out[i] {
                out[i] = d;
            }
        }
    }
    out
}

#[test]
fn criterion_2_matrix_profile_oracle_equivalence() {
    let started = std::time::Instant::now();
    let mut rng = SplitMix64::new(61);
    let mut worst = 0.0f64;
    let mut runs = 0;
    while runs < 20 {
        let m = [4, 8, 16][rng.below(3)];
        let len = 2 * m + rng.below(301 - 2 * m).max(1);
        let mut series: Vec<f64> = (0..len).map(|_| rng.normal()).collect();
        // occasionally plant a repeat so near-zero distances are covered
        if runs % 4 == 0 && len >= 3 * m + 2 {
            let src = rng.below(len - m + 1);
            let dst = rng.below(len - m + 1);
            let pattern: Vec<f64> = series[src..src + m].to_vec();
            series[dst..dst + m].copy_from_slice(&pattern);
        }
        let n = len - m + 1;
        let mask: Vec<bool> = (0..n).map(|_| rng.next_f64() > 0.2).collect();
        let exclusion = m.div_ceil(2);
        let mp = match matrix_profile(&series, m, exclusion, &mask) {
            Ok(mp) => mp,
            Err(_) => continue, // mask left no valid pair; draw again
        };
        let expected = oracle_profile(&series, m, exclusion, &mask);
        for i in 0..n {
            match (mp.distances[i].is_finite(), expected[i].is_finite()) {
                (true, true) => worst = worst.max((mp.distances[i] - expected[i]).abs()),
                (false, false) => {}
                _ => worst = f64::INFINITY,
            }
        }
        runs += 1;
    }
    criterion(
        2,
        "matrix profile equals the brute-force oracle at every position",
        worst < 1e-9,
        format!(
            "20 series, worst abs diff {worst:.2e}, {:.1}s",
            started.elapsed().as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// 3. Prior-enhanced attention vs an independent step-by-step evaluation.
// ---------------------------------------------------------------------------

fn naive_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for p in 0..k {
            for j in 0..n {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

fn naive_softmax_rows(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.iter().map(|e| e / sum).collect()
        })
        .collect()
}

#[test]
fn criterion_3_pesa_reduction() {
    let mut rng = SplitMix64::new(67);
    let mut worst_out = 0.0f64;
    let mut worst_row_sum = 0.0f64;
    // 50 unit-prior cases (the documented reduction), then 25 with random
    // positive priors for good measure
    for case in 0..75 {
        let n = 2 + rng.below(7);
        let d = 1 + rng.below(4);
        let mk = |rng: &mut SplitMix64, r: usize, c: usize| -> Vec<Vec<f64>> {
            (0..r).map(|_| (0..c).map(|_| rng.normal()).collect()).collect()
        };
        let q = mk(&mut rng, n, d);
        let k = mk(&mut rng, n, d);
        let v = mk(&mut rng, n, d);
        let priors: Vec<f64> = if case < 50 {
            vec![1.0; n]
        } else {
            (0..n).map(|_| rng.uniform(0.1, 4.0)).collect()
        };

        // independent evaluation: scores, softmax, elementwise prior
        // product, second softmax, value mix
        let kt: Vec<Vec<f64>> = (0..d).map(|j| (0..n).map(|i| k[i][j]).collect()).collect();
        let mut scores = naive_matmul(&q, &kt);
        let scale = 1.0 / (d as f64).sqrt();
        for row in &mut scores {
            for x in row {
                *x *= scale;
            }
        }
        let a = naive_softmax_rows(&scores);
        let mut weighted = a.clone();
        for i in 0..n {
            for j in 0..n {
                let p = if i == j { 1.0 } else { priors[i] * priors[j] };
                weighted[i][j] = a[i][j] * p;
            }
        }
        let final_weights = naive_softmax_rows(&weighted);
        let expected = naive_matmul(&final_weights, &v);

        // the implementation under test
        let flat = |m: &[Vec<f64>]| -> Vec<f64> { m.iter().flatten().copied().collect() };
        let mut g = Graph::new();
        let qn = g.constant(Tensor::new(vec![n, d], flat(&q)).unwrap());
        let kn = g.constant(Tensor::new(vec![n, d], flat(&k)).unwrap());
        let vn = g.constant(Tensor::new(vec![n, d], flat(&v)).unwrap());
        let p = vsformer::model::prior_matrix(&priors).unwrap();
        let out = g.attention(qn, kn, vn, Some(&p)).unwrap();
        let got = g.value(out);
        for i in 0..n {
            for j in 0..d {
                worst_out = worst_out.max((got.at(i, j) - expected[i][j]).abs());
            }
        }
        let w = g.attention_weights(out).unwrap();
        for i in 0..n {
            let sum: f64 = w.row_slice(i).iter().sum();
            worst_row_sum = worst_row_sum.max((sum - 1.0).abs());
            for j in 0..n {
                worst_out = worst_out.max((w.at(i, j) - final_weights[i][j]).abs());
            }
        }
    }
    criterion(
        3,
        "attention equals the independent step-by-step evaluation",
        worst_out < 1e-12 && worst_row_sum < 1e-12,
        format!("worst output diff {worst_out:.2e}, worst row-sum error {worst_row_sum:.2e}"),
    );
}

// ---------------------------------------------------------------------------
// 4. Token-count formulas over the full grid.
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_token_count_formulas() {
    let started = std::time::Instant::now();
    let mut rng = SplitMix64::new(71);
    let mut checked = 0usize;
    let mut pass = true;

    // value side: V x M grid on a small dataset
    for v in 1..=6usize {
        let instances = vec![vsformer::dataset::MtsInstance {
            values: (0..v).map(|_| (0..16).map(|_| rng.normal()).collect()).collect(),
            label: 0,
        }];
        let d = MtsDataset::new(instances, vec!["a".into(), "b".into()]).unwrap();
        for m_g in 1..=10usize {
            let tokens = build_value_tokens(&d, m_g).unwrap();
            let expected = v * 3 * ((1 + m_g) * m_g / 2);
            pass &= tokens[0].len() == expected && value_token_count(v, m_g) == expected;
            checked += 1;
        }
    }

    // shape side: V x C x k grid with real motif discovery
    for v in 1..=6usize {
        for c in 2..=5usize {
            let mut instances = Vec::new();
            for class in 0..c {
                for _ in 0..3 {
                    instances.push(vsformer::dataset::MtsInstance {
                        values: (0..v).map(|_| (0..60).map(|_| rng.normal()).collect()).collect(),
                        label: class,
                    });
                }
            }
            let names = (0..c).map(|i| format!("c{i}")).collect();
            let d = MtsDataset::new(instances, names).unwrap();
            for k in 1..=6usize {
                let prototypes = discover_prototypes(&d, k, 6).unwrap();
                pass &= prototypes.len() == k * v * c;
                let tokens = vsformer::shape::build_shape_tokens(&d, &prototypes).unwrap();
                pass &= tokens.iter().all(|t| t.len() == k * v * c);
                checked += 1;
            }
        }
    }
    criterion(
        4,
        "token counts equal k*V*C and V*3*(1+M)M/2 across the grid",
        pass,
        format!("{checked} grid points, {:.1}s", started.elapsed().as_secs_f64()),
    );
}

// ---------------------------------------------------------------------------
// 5. Prior formula spot values and the feature-importance oracle.
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_prior_formulas() {
    // distance-ratio weight: D1 = 1, D2 = 3, alpha = 3 -> e^{0.75}
    let w = prototype_weight(0, &[1.0, 3.0], &[0, 1], 0, 3.0).unwrap();
    let ratio_ok = (w.weight - 0.75f64.exp()).abs() < 1e-12;

    // token weight: d = 0, beta = 4 -> 5
    let tw = shape_token_weight(0.0, 4.0).unwrap();
    let token_ok = tw == 5.0;

    // feature importance vs a contingency-table mutual-information oracle
    let values = [0.3, 2.1, 0.1, 1.9, 0.4, 2.3, 0.2, 1.7];
    let labels = [0, 1, 0, 1, 0, 1, 1, 0];
    let fi = fit_feature_importance(&values, &labels, 2, 4).unwrap();
    let n = values.len() as f64;
    let mut oracle = 0.0;
    let n_bins = fi.bin_class_counts.len();
    for b in 0..n_bins {
        for cls in 0..2 {
            let joint = fi.bin_class_counts[b][cls] as f64 / n;
            if joint == 0.0 {
                continue;
            }
            let p_bin = fi.bin_class_counts[b].iter().sum::<usize>() as f64 / n;
            let p_cls = fi.bin_class_counts.iter().map(|r| r[cls]).sum::<usize>() as f64 / n;
            oracle += joint * (joint / (p_bin * p_cls)).log2();
        }
    }
    let fi_ok = (fi.importance - oracle).abs() < 1e-12;

    criterion(
        5,
        "prior weight formulas and feature importance match their oracles",
        ratio_ok && token_ok && fi_ok,
        format!(
            "w = {:.6} vs e^0.75, token weight {tw}, FI {:.6} vs oracle {:.6}",
            w.weight, fi.importance, oracle
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Desk-scale run: BasicMotions when available, synthetic otherwise.
// ---------------------------------------------------------------------------

fn find_basic_motions() -> Option<(std::path::PathBuf, std::path::PathBuf)> {
    let mut roots: Vec<std::path::PathBuf> = vec!["data".into(), "../data".into(), "../../data".into()];
    if let Ok(dir) = std::env::var("UEA_DATA_DIR") {
        roots.insert(0, dir.into());
    }
    for root in roots {
        let train = root.join("BasicMotions").join("BasicMotions_TRAIN.ts");
        let test = root.join("BasicMotions").join("BasicMotions_TEST.ts");
        if train.exists() && test.exists() {
            return Some((train, test));
        }
    }
    None
}

#[test]
fn criterion_6_desk_scale_accuracy() {
    let started = std::time::Instant::now();
    if let Some((train_path, test_path)) = find_basic_motions() {
        let corpus = parse_ts(&train_path).unwrap();
        let test = parse_ts(&test_path).unwrap();
        let mut worst = f64::INFINITY;
        let mut detail = String::new();
        for k in [3usize, 6] {
            for m_g in [5usize, 10] {
                let config = TrainConfig {
                    k,
                    granularity_max: m_g,
                    seed: 1,
                    ..TrainConfig::default()
                };
                let (train_set, val_set) = split_train_val(&corpus, 0.2, 1).unwrap();
                let (cp, _) = train(&config, &train_set, &val_set).unwrap();
                let metrics = evaluate(&cp, &test).unwrap();
                detail.push_str(&format!("k={k} M={m_g}: {:.3}; ", metrics.accuracy));
                worst = worst.min(metrics.accuracy);
            }
        }
        criterion(
            6,
            "BasicMotions test accuracy at least 0.90 for every configuration",
            worst >= 0.90 && started.elapsed().as_secs() <= 30 * 60,
            format!("{detail}{:.0}s", started.elapsed().as_secs_f64()),
        );
    } else {
        // dataset unavailable: the synthetic mixed corpus must reach 0.95
        let (train_set, val_set, test_set) = corpus_splits(SyntheticKind::Mixed, 60, 2, 64, 2, 1);
        let config = TrainConfig {
            k: 3,
            granularity_max: 5,
            d_model: 8,
            d_ff: 32,
            lr: 0.005,
            epochs: 40,
            patience: 15,
            seed: 1,
            ..TrainConfig::default()
        };
        let (_, report) = train_and_evaluate(&config, &train_set, &val_set, Some(&test_set)).unwrap();
        let accuracy = report.test.unwrap().accuracy;
        criterion(
            6,
            "synthetic mixed substitute reaches 0.95 (BasicMotions file not present)",
            accuracy >= 0.95,
            format!("accuracy {accuracy:.3}, {:.0}s", started.elapsed().as_secs_f64()),
        );
    }
}

// ---------------------------------------------------------------------------
// 7. The gate moves toward the informative branch.
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_lambda_direction() {
    let started = std::time::Instant::now();
    let run = |kind: SyntheticKind| -> f64 {
        let (train_set, val_set, test_set) = corpus_splits(kind, 60, 2, 64, 4, 1);
        let config = fast_config(1);
        let (_, report) =
            train_and_evaluate(&config, &train_set, &val_set, Some(&test_set)).unwrap();
        report.test.unwrap().mean_lambda
    };
    let value_lambda = run(SyntheticKind::Value);
    let shape_lambda = run(SyntheticKind::Shape);
    criterion(
        7,
        "mean gate favors values on the value corpus and shapes on the shape corpus",
        (1.0 - value_lambda) > 0.5 && shape_lambda > 0.5,
        format!(
            "value corpus: mean(1-lambda) {:.3}; shape corpus: mean lambda {:.3}; {:.0}s",
            1.0 - value_lambda,
            shape_lambda,
            started.elapsed().as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. Ablation direction on the mixed corpus.
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_ablation_direction() {
    let started = std::time::Instant::now();
    use vsformer::model::AblationMode;
    let mut means = [0.0f64; 3];
    let modes = [
        AblationMode::Full,
        AblationMode::ShapeOnly,
        AblationMode::ValueOnly,
    ];
    for seed in [1u64, 2, 3] {
        let (train_set, val_set, test_set) = corpus_splits(SyntheticKind::Mixed, 60, 2, 64, 2, seed);
        for (i, mode) in modes.iter().enumerate() {
            let mut config = fast_config(seed);
            config.mode = *mode;
            let (_, report) =
                train_and_evaluate(&config, &train_set, &val_set, Some(&test_set)).unwrap();
            means[i] += report.test.unwrap().accuracy / 3.0;
        }
    }
    criterion(
        8,
        "full mode's mean accuracy is at least both single branches'",
        means[0] >= means[1] && means[0] >= means[2],
        format!(
            "full {:.3}, shape-only {:.3}, value-only {:.3}; {:.0}s",
            means[0],
            means[1],
            means[2],
            started.elapsed().as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// 9. Determinism and persistence.
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_determinism_and_persistence() {
    let (train_set, val_set, test_set) = corpus_splits(SyntheticKind::Mixed, 10, 2, 48, 2, 73);
    let mut config = fast_config(73);
    config.epochs = 8;
    config.patience = 8;

    let (cp_a, report_a) = train(&config, &train_set, &val_set).unwrap();
    let (cp_b, report_b) = train(&config, &train_set, &val_set).unwrap();
    let identical_metrics = report_a
        .epochs
        .iter()
        .zip(&report_b.epochs)
        .all(|(a, b)| {
            a.train_loss.to_bits() == b.train_loss.to_bits()
                && a.val_loss.to_bits() == b.val_loss.to_bits()
                && a.train_accuracy.to_bits() == b.train_accuracy.to_bits()
                && a.val_accuracy.to_bits() == b.val_accuracy.to_bits()
        })
        && report_a.epochs.len() == report_b.epochs.len();

    let bytes = checkpoint_bytes(&cp_a).unwrap();
    let loaded = load_checkpoint_bytes(&bytes).unwrap();
    let before = predict(&cp_a, &test_set).unwrap();
    let after = predict(&loaded, &test_set).unwrap();
    let identical_predictions = before
        .iter()
        .zip(&after)
        .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));

    criterion(
        9,
        "seeded runs repeat exactly and checkpoints preserve predictions",
        identical_metrics && identical_predictions && cp_a == cp_b,
        format!(
            "{} epochs compared, {} predictions compared",
            report_a.epochs.len(),
            before.len()
        ),
    );
}
