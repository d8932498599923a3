//! The two-branch classifier: token-metadata encoding, prior-enhanced
//! self-attention encoders over shape and value tokens, and the gated fusion
//! decision layer.

mod forward;
mod tsi;

pub use forward::{
    bind_params, embed_tokens, model_forward, prior_matrix, BoundParams, BranchInput,
    ForwardArtifacts, ModelInputs, Phase,
};
pub use tsi::{tsi_encode, variable_code_width, TsiRecord};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use vsf_numerics::rng::SplitMix64;
use vsf_numerics::{NumericsError, Tensor};

/// Attention heads per encoder layer.
pub const N_HEADS: usize = 8;
/// The value branch operates on scalar tokens, so its encoder width is fixed.
pub const VALUE_D_MODEL: usize = 8;
pub const VALUE_D_FF: usize = 16;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("variable {variable} out of range for {n_variables} variables")]
    VariableOutOfRange {
        variable: usize,
        n_variables: usize,
    },
    #[error("priors must be nonnegative, got {0}")]
    NegativePrior(f64),
    #[error("invalid token interval [{t_start}, {t_end}) for series length {series_len}")]
    BadInterval {
        t_start: usize,
        t_end: usize,
        series_len: usize,
    },
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
}

/// Which structural variant of the model to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationMode {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "shape-only")]
    ShapeOnly,
    #[serde(rename = "value-only")]
    ValueOnly,
    /// Attention ignores priors: a single softmax over the score matrix.
    #[serde(rename = "vanilla-attn")]
    VanillaAttention,
    /// The token-metadata projection is replaced by a trainable per-token
    /// positional embedding.
    #[serde(rename = "learnable-pe")]
    LearnablePositional,
}

impl AblationMode {
    pub fn uses_shape_branch(self) -> bool {
        self != AblationMode::ValueOnly
    }

    pub fn uses_value_branch(self) -> bool {
        self != AblationMode::ShapeOnly
    }

    pub fn uses_gate(self) -> bool {
        self.uses_shape_branch() && self.uses_value_branch()
    }

    pub fn prior_in_attention(self) -> bool {
        self != AblationMode::VanillaAttention
    }

    pub fn learnable_positional(self) -> bool {
        self == AblationMode::LearnablePositional
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::ShapeOnly => "shape-only",
            AblationMode::ValueOnly => "value-only",
            AblationMode::VanillaAttention => "vanilla-attn",
            AblationMode::LearnablePositional => "learnable-pe",
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(AblationMode::Full),
            "shape-only" => Ok(AblationMode::ShapeOnly),
            "value-only" => Ok(AblationMode::ValueOnly),
            "vanilla-attn" => Ok(AblationMode::VanillaAttention),
            "learnable-pe" => Ok(AblationMode::LearnablePositional),
            other => Err(format!(
                "unknown mode {other:?} (full|shape-only|value-only|vanilla-attn|learnable-pe)"
            )),
        }
    }
}

/// Everything the parameter layout depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_classes: usize,
    pub n_variables: usize,
    pub series_len: usize,
    pub shape_d_model: usize,
    pub shape_d_ff: usize,
    pub encoder_layers: usize,
    /// Motif length; the shape branch's token dimension.
    pub motif_len: usize,
    pub n_shape_tokens: usize,
    pub n_value_tokens: usize,
    pub mode: AblationMode,
    /// Append a 3-bit one-hot statistic-kind code to value-token records.
    pub tsi_stat_kind: bool,
}

impl ModelConfig {
    /// Width of the token-metadata record for a branch: variable code bits
    /// plus start, end, and prior columns (plus the optional kind code).
    pub fn tsi_width(&self, value_branch: bool) -> usize {
        let kind_bits = if value_branch && self.tsi_stat_kind { 3 } else { 0 };
        variable_code_width(self.n_variables) + 3 + kind_bits
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BnState {
    fn new(features: usize) -> Self {
        BnState {
            running_mean: Tensor::zeros(&[1, features]),
            running_var: Tensor::ones(&[1, features]),
        }
    }

    /// Exponential update toward the batch statistics with momentum 0.1.
    pub fn update(&mut self, batch_mean: &Tensor, batch_var: &Tensor) {
        const MOMENTUM: f64 = 0.1;
        for (r, &b) in self
            .running_mean
            .data_mut()
            .iter_mut()
            .zip(batch_mean.data())
        {
            *r = (1.0 - MOMENTUM) * *r + MOMENTUM * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(batch_var.data()) {
            *r = (1.0 - MOMENTUM) * *r + MOMENTUM * b;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerParams {
    pub heads: Vec<HeadParams>,
    pub w_o: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_w2: Tensor,
    pub bn1: BnParams,
    pub bn2: BnParams,
    pub bn1_state: BnState,
    pub bn2_state: BnState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchParams {
    /// Token-metadata projection (d_I x d_model); absent in learnable-pe mode.
    pub w_i: Option<Tensor>,
    /// Trainable per-token-index embedding (n_tok x d_model) for the
    /// learnable-pe ablation.
    pub pos_embed: Option<Tensor>,
    /// Token-value projection (d_model x d_token).
    pub w_s: Tensor,
    pub layers: Vec<EncoderLayerParams>,
    pub d_model: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub shape: Option<BranchParams>,
    pub value: Option<BranchParams>,
    /// Class head over the shape representation (C x d_model).
    pub w_shape_head: Option<Tensor>,
    /// Class head over the value representation (C x d_model).
    pub w_value_head: Option<Tensor>,
    /// Gate over the concatenated representations (1 x (d_shape + d_value)).
    pub w_gate: Option<Tensor>,
    pub b_gate: Option<Tensor>,
}

fn uniform_init(rng: &mut SplitMix64, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect(),
    )
    .expect("positive dimensions")
}

#[allow(clippy::too_many_arguments)]
fn init_branch(
    rng: &mut SplitMix64,
    d_model: usize,
    d_ff: usize,
    d_token: usize,
    d_i: usize,
    n_tokens: usize,
    layers: usize,
    learnable_positional: bool,
) -> BranchParams {
    let d_head = d_model / N_HEADS;
    let layers = (0..layers)
        .map(|_| EncoderLayerParams {
            heads: (0..N_HEADS)
                .map(|_| HeadParams {
                    w_q: uniform_init(rng, d_model, d_head, d_model),
                    w_k: uniform_init(rng, d_model, d_head, d_model),
                    w_v: uniform_init(rng, d_model, d_head, d_model),
                })
                .collect(),
            w_o: uniform_init(rng, d_model, d_model, d_model),
            ffn_w1: uniform_init(rng, d_model, d_ff, d_model),
            ffn_w2: uniform_init(rng, d_ff, d_model, d_ff),
            bn1: BnParams {
                gamma: Tensor::ones(&[1, d_model]),
                beta: Tensor::zeros(&[1, d_model]),
            },
            bn2: BnParams {
                gamma: Tensor::ones(&[1, d_model]),
                beta: Tensor::zeros(&[1, d_model]),
            },
            bn1_state: BnState::new(d_model),
            bn2_state: BnState::new(d_model),
        })
        .collect();
    BranchParams {
        w_i: (!learnable_positional).then(|| uniform_init(rng, d_i, d_model, d_i)),
        pos_embed: learnable_positional.then(|| uniform_init(rng, n_tokens, d_model, d_model)),
        w_s: uniform_init(rng, d_model, d_token, d_token),
        layers,
        d_model,
    }
}

impl ModelParams {
    /// Seeded initialization: weights uniform in +/-sqrt(1/fan_in), batch
    /// norm at identity, gate bias 0.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mode = config.mode;
        let shape = mode.uses_shape_branch().then(|| {
            init_branch(
                &mut rng,
                config.shape_d_model,
                config.shape_d_ff,
                config.motif_len,
                config.tsi_width(false),
                config.n_shape_tokens,
                config.encoder_layers,
                mode.learnable_positional(),
            )
        });
        let value = mode.uses_value_branch().then(|| {
            init_branch(
                &mut rng,
                VALUE_D_MODEL,
                VALUE_D_FF,
                1,
                config.tsi_width(true),
                config.n_value_tokens,
                config.encoder_layers,
                mode.learnable_positional(),
            )
        });
        let c = config.n_classes;
        let w_shape_head = shape
            .as_ref()
            .map(|b| uniform_init(&mut rng, c, b.d_model, b.d_model));
        let w_value_head = value
            .as_ref()
            .map(|b| uniform_init(&mut rng, c, b.d_model, b.d_model));
        // The gate starts neutral: zero weights put lambda at exactly 0.5
        // for every instance, so its drift reflects learned signal rather
        // than initialization luck.
        let (w_gate, b_gate) = if mode.uses_gate() {
            let concat = config.shape_d_model + VALUE_D_MODEL;
            (
                Some(Tensor::zeros(&[1, concat])),
                Some(Tensor::zeros(&[1, 1])),
            )
        } else {
            (None, None)
        };
        ModelParams {
            config,
            shape,
            value,
            w_shape_head,
            w_value_head,
            w_gate,
            b_gate,
        }
    }

    /// Trainable tensors in their fixed declaration order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, branch) in [("shape", &self.shape), ("value", &self.value)] {
            let Some(b) = branch else { continue };
            if let Some(w_i) = &b.w_i {
                out.push((format!("{prefix}.w_i"), w_i));
            }
            if let Some(pe) = &b.pos_embed {
                out.push((format!("{prefix}.pos_embed"), pe));
            }
            out.push((format!("{prefix}.w_s"), &b.w_s));
            for (l, layer) in b.layers.iter().enumerate() {
                for (h, head) in layer.heads.iter().enumerate() {
                    out.push((format!("{prefix}.l{l}.h{h}.w_q"), &head.w_q));
                    out.push((format!("{prefix}.l{l}.h{h}.w_k"), &head.w_k));
                    out.push((format!("{prefix}.l{l}.h{h}.w_v"), &head.w_v));
                }
                out.push((format!("{prefix}.l{l}.w_o"), &layer.w_o));
                out.push((format!("{prefix}.l{l}.ffn.w1"), &layer.ffn_w1));
                out.push((format!("{prefix}.l{l}.ffn.w2"), &layer.ffn_w2));
                out.push((format!("{prefix}.l{l}.bn1.gamma"), &layer.bn1.gamma));
                out.push((format!("{prefix}.l{l}.bn1.beta"), &layer.bn1.beta));
                out.push((format!("{prefix}.l{l}.bn2.gamma"), &layer.bn2.gamma));
                out.push((format!("{prefix}.l{l}.bn2.beta"), &layer.bn2.beta));
            }
        }
        if let Some(t) = &self.w_shape_head {
            out.push(("decision.w_shape".into(), t));
        }
        if let Some(t) = &self.w_value_head {
            out.push(("decision.w_value".into(), t));
        }
        if let Some(t) = &self.w_gate {
            out.push(("decision.w_gate".into(), t));
        }
        if let Some(t) = &self.b_gate {
            out.push(("decision.b_gate".into(), t));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (prefix, branch) in [("shape", &mut self.shape), ("value", &mut self.value)] {
            let Some(b) = branch else { continue };
            if let Some(w_i) = &mut b.w_i {
                out.push((format!("{prefix}.w_i"), w_i));
            }
            if let Some(pe) = &mut b.pos_embed {
                out.push((format!("{prefix}.pos_embed"), pe));
            }
            out.push((format!("{prefix}.w_s"), &mut b.w_s));
            for (l, layer) in b.layers.iter_mut().enumerate() {
                for (h, head) in layer.heads.iter_mut().enumerate() {
                    out.push((format!("{prefix}.l{l}.h{h}.w_q"), &mut head.w_q));
                    out.push((format!("{prefix}.l{l}.h{h}.w_k"), &mut head.w_k));
                    out.push((format!("{prefix}.l{l}.h{h}.w_v"), &mut head.w_v));
                }
                out.push((format!("{prefix}.l{l}.w_o"), &mut layer.w_o));
                out.push((format!("{prefix}.l{l}.ffn.w1"), &mut layer.ffn_w1));
                out.push((format!("{prefix}.l{l}.ffn.w2"), &mut layer.ffn_w2));
                out.push((format!("{prefix}.l{l}.bn1.gamma"), &mut layer.bn1.gamma));
                out.push((format!("{prefix}.l{l}.bn1.beta"), &mut layer.bn1.beta));
                out.push((format!("{prefix}.l{l}.bn2.gamma"), &mut layer.bn2.gamma));
                out.push((format!("{prefix}.l{l}.bn2.beta"), &mut layer.bn2.beta));
            }
        }
        if let Some(t) = &mut self.w_shape_head {
            out.push(("decision.w_shape".into(), t));
        }
        if let Some(t) = &mut self.w_value_head {
            out.push(("decision.w_value".into(), t));
        }
        if let Some(t) = &mut self.w_gate {
            out.push(("decision.w_gate".into(), t));
        }
        if let Some(t) = &mut self.b_gate {
            out.push(("decision.b_gate".into(), t));
        }
        out
    }

    /// Batch-norm running statistics in declaration order.
    pub fn bn_states(&self) -> Vec<(String, &BnState)> {
        let mut out = Vec::new();
        for (prefix, branch) in [("shape", &self.shape), ("value", &self.value)] {
            let Some(b) = branch else { continue };
            for (l, layer) in b.layers.iter().enumerate() {
                out.push((format!("{prefix}.l{l}.bn1"), &layer.bn1_state));
                out.push((format!("{prefix}.l{l}.bn2"), &layer.bn2_state));
            }
        }
        out
    }

    pub fn bn_states_mut(&mut self) -> Vec<(String, &mut BnState)> {
        let mut out: Vec<(String, &mut BnState)> = Vec::new();
        for (prefix, branch) in [("shape", &mut self.shape), ("value", &mut self.value)] {
            let Some(b) = branch else { continue };
            for (l, layer) in b.layers.iter_mut().enumerate() {
                out.push((format!("{prefix}.l{l}.bn1"), &mut layer.bn1_state));
                out.push((format!("{prefix}.l{l}.bn2"), &mut layer.bn2_state));
            }
        }
        out
    }
}
