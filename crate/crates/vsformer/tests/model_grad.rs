//! Finite-difference gradient checks over whole model structures, one per
//! ablation layout, on real tokenized inputs.
#![allow(clippy::needless_range_loop)]

mod common;

use common::{corpus_splits, fast_config};
use vsf_numerics::gradcheck::relative_error;
use vsf_numerics::Graph;
use vsformer::dataset::SyntheticKind;
use vsformer::model::{bind_params, model_forward, AblationMode, ModelParams, Phase};
use vsformer::trainer::pipeline::{model_config, tokenize_dataset};
use vsformer::trainer::fit_artifacts;

const FD_STEP: f64 = 1e-6;
const TOL: f64 = 1e-4;

/// Autodiff vs central differences for every named parameter of a model
/// trained in `mode`, on a 2-instance batch.
fn check_mode(mode: AblationMode) {
    let (train_set, _, _) = corpus_splits(SyntheticKind::Mixed, 6, 2, 32, 2, 41);
    let mut config = fast_config(41);
    config.k = 1;
    config.granularity_max = 2;
    config.d_ff = 16;
    config.mode = mode;

    let artifacts = fit_artifacts(&train_set, &config).unwrap();
    let mcfg = model_config(&artifacts, &config, &train_set);
    let tokenized = tokenize_dataset(&train_set, &artifacts, &mcfg).unwrap();
    let mut params = ModelParams::init(mcfg, 43);
    let batch = [0usize, 1];
    let labels = tokenized.gather_labels(&batch);

    let loss_of = |params: &ModelParams| -> f64 {
        let inputs = tokenized.gather(&batch);
        let mut g = Graph::new();
        let bound = bind_params(&mut g, params).unwrap();
        let out = model_forward(&mut g, params, &bound, &inputs, Phase::Train, false).unwrap();
        let loss = g.cross_entropy(out.probs, &labels).unwrap();
        g.value(loss).scalar_value()
    };

    // autodiff gradients
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

    for (name, grad) in &analytic {
        let numel = grad.len();
        for j in 0..numel {
            let original = {
                let mut named = params.named_tensors_mut();
                let slot = named
                    .iter_mut()
                    .find(|(n, _)| n == name)
                    .expect("named parameter");
                let orig = slot.1.data()[j];
                slot.1.data_mut()[j] = orig + FD_STEP;
                orig
            };
            let plus = loss_of(&params);
            {
                let mut named = params.named_tensors_mut();
                let slot = named.iter_mut().find(|(n, _)| n == name).unwrap();
                slot.1.data_mut()[j] = original - FD_STEP;
            }
            let minus = loss_of(&params);
            {
                let mut named = params.named_tensors_mut();
                let slot = named.iter_mut().find(|(n, _)| n == name).unwrap();
                slot.1.data_mut()[j] = original;
            }
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(grad[j], numeric);
            assert!(
                err < TOL,
                "{}: {name}[{j}] autodiff {} vs fd {numeric}, rel err {err}",
                mode.name(),
                grad[j]
            );
        }
    }
}

#[test]
fn full_mode_gradients_match_finite_differences() {
    check_mode(AblationMode::Full);
}

#[test]
fn shape_only_gradients_match_finite_differences() {
    check_mode(AblationMode::ShapeOnly);
}

#[test]
fn value_only_gradients_match_finite_differences() {
    check_mode(AblationMode::ValueOnly);
}

#[test]
fn vanilla_attention_gradients_match_finite_differences() {
    check_mode(AblationMode::VanillaAttention);
}

#[test]
fn learnable_positional_gradients_match_finite_differences() {
    check_mode(AblationMode::LearnablePositional);
}
