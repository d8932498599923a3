//! Graph construction for the batched forward pass. One graph covers one
//! batch: attention runs per instance, batch normalization runs over the
//! flattened (batch x token) rows, and the decision layer fuses the pooled
//! branch representations per instance.

use super::{BnState, BranchParams, ModelError, ModelParams, N_HEADS};
use vsf_numerics::{Graph, NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// One instance's token matrix, metadata records, and per-token priors.
#[derive(Clone, Debug)]
pub struct BranchInput {
    /// n_tok x d_token.
    pub tokens: Tensor,
    /// n_tok x d_I.
    pub tsi: Tensor,
    pub priors: Vec<f64>,
}

/// A batch of instances for whichever branches the mode uses.
#[derive(Clone, Debug, Default)]
pub struct ModelInputs {
    pub shape: Option<Vec<BranchInput>>,
    pub value: Option<Vec<BranchInput>>,
}

impl ModelInputs {
    pub fn batch_size(&self) -> usize {
        self.shape
            .as_ref()
            .or(self.value.as_ref())
            .map_or(0, |v| v.len())
    }
}

/// Node handles for every trainable tensor, in `named_tensors` order plus a
/// structured view for the forward pass.
pub struct BoundParams {
    pub ordered: Vec<NodeId>,
    shape: Option<BoundBranch>,
    value: Option<BoundBranch>,
    w_shape_head: Option<NodeId>,
    w_value_head: Option<NodeId>,
    w_gate: Option<NodeId>,
    b_gate: Option<NodeId>,
}

struct BoundBranch {
    w_i: Option<NodeId>,
    pos_embed: Option<NodeId>,
    w_s: NodeId,
    layers: Vec<BoundLayer>,
}

struct BoundLayer {
    heads: Vec<[NodeId; 3]>,
    w_o: NodeId,
    ffn_w1: NodeId,
    ffn_w2: NodeId,
    bn1: [NodeId; 2],
    bn2: [NodeId; 2],
}

/// Insert every trainable tensor as a graph leaf. The `ordered` list lines up
/// with `ModelParams::named_tensors`, so gradients can be read back by zip.
pub fn bind_params(g: &mut Graph, params: &ModelParams) -> Result<BoundParams, ModelError> {
    let mut ordered = Vec::new();
    let bind_branch = |g: &mut Graph,
                           branch: &Option<BranchParams>,
                           ordered: &mut Vec<NodeId>|
     -> Result<Option<BoundBranch>, ModelError> {
        let Some(b) = branch else { return Ok(None) };
        let w_i = match &b.w_i {
            Some(t) => {
                let id = g.param(t.clone())?;
                ordered.push(id);
                Some(id)
            }
            None => None,
        };
        let pos_embed = match &b.pos_embed {
            Some(t) => {
                let id = g.param(t.clone())?;
                ordered.push(id);
                Some(id)
            }
            None => None,
        };
        let w_s = g.param(b.w_s.clone())?;
        ordered.push(w_s);
        let mut layers = Vec::with_capacity(b.layers.len());
        for layer in &b.layers {
            let mut heads = Vec::with_capacity(layer.heads.len());
            for head in &layer.heads {
                let ids = [
                    g.param(head.w_q.clone())?,
                    g.param(head.w_k.clone())?,
                    g.param(head.w_v.clone())?,
                ];
                ordered.extend_from_slice(&ids);
                heads.push(ids);
            }
            let w_o = g.param(layer.w_o.clone())?;
            let ffn_w1 = g.param(layer.ffn_w1.clone())?;
            let ffn_w2 = g.param(layer.ffn_w2.clone())?;
            let bn1 = [g.param(layer.bn1.gamma.clone())?, g.param(layer.bn1.beta.clone())?];
            let bn2 = [g.param(layer.bn2.gamma.clone())?, g.param(layer.bn2.beta.clone())?];
            ordered.extend_from_slice(&[w_o, ffn_w1, ffn_w2, bn1[0], bn1[1], bn2[0], bn2[1]]);
            layers.push(BoundLayer {
                heads,
                w_o,
                ffn_w1,
                ffn_w2,
                bn1,
                bn2,
            });
        }
        Ok(Some(BoundBranch {
            w_i,
            pos_embed,
            w_s,
            layers,
        }))
    };

    let shape = bind_branch(g, &params.shape, &mut ordered)?;
    let value = bind_branch(g, &params.value, &mut ordered)?;
    let mut bind_opt = |g: &mut Graph, t: &Option<Tensor>| -> Result<Option<NodeId>, ModelError> {
        match t {
            Some(t) => {
                let id = g.param(t.clone())?;
                ordered.push(id);
                Ok(Some(id))
            }
            None => Ok(None),
        }
    };
    let w_shape_head = bind_opt(g, &params.w_shape_head)?;
    let w_value_head = bind_opt(g, &params.w_value_head)?;
    let w_gate = bind_opt(g, &params.w_gate)?;
    let b_gate = bind_opt(g, &params.b_gate)?;
    Ok(BoundParams {
        ordered,
        shape,
        value,
        w_shape_head,
        w_value_head,
        w_gate,
        b_gate,
    })
}

/// The prior-product matrix: `P[i][j] = p_i * p_j` off the diagonal, 1 on it.
pub fn prior_matrix(priors: &[f64]) -> Result<Tensor, ModelError> {
    let n = priors.len();
    if let Some(&bad) = priors.iter().find(|&&p| p < 0.0 || !p.is_finite()) {
        return Err(ModelError::NegativePrior(bad));
    }
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            data[i * n + j] = if i == j { 1.0 } else { priors[i] * priors[j] };
        }
    }
    Ok(Tensor::new(vec![n, n], data)?)
}

/// The encoding-layer combination: `U = tsi . W_I + tokens . W_S^T`.
pub fn embed_tokens(
    g: &mut Graph,
    tokens: NodeId,
    tsi: NodeId,
    w_i: NodeId,
    w_s: NodeId,
) -> Result<NodeId, ModelError> {
    let projected_meta = g.matmul(tsi, w_i)?;
    let w_s_t = g.transpose(w_s)?;
    let projected_tokens = g.matmul(tokens, w_s_t)?;
    Ok(g.add(projected_meta, projected_tokens)?)
}

struct BranchOutcome {
    pooled: Vec<NodeId>,
    bn_nodes: Vec<NodeId>,
    received_attention: Vec<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
fn branch_forward(
    g: &mut Graph,
    label: &str,
    params: &BranchParams,
    bound: &BoundBranch,
    inputs: &[BranchInput],
    expected_tokens: usize,
    use_prior: bool,
    phase: Phase,
    capture_attention: bool,
) -> Result<BranchOutcome, ModelError> {
    let n_tok = expected_tokens;
    let d_token = params.w_s.cols();
    for (i, input) in inputs.iter().enumerate() {
        if input.tokens.rows() != n_tok || input.priors.len() != n_tok {
            return Err(ModelError::ConfigMismatch(format!(
                "{label} instance {i}: {} tokens with {} priors, expected {n_tok}",
                input.tokens.rows(),
                input.priors.len()
            )));
        }
        if input.tokens.cols() != d_token {
            return Err(ModelError::ConfigMismatch(format!(
                "{label} instance {i}: token dimension {} != {d_token}",
                input.tokens.cols()
            )));
        }
        if let Some(w_i) = &params.w_i {
            if input.tsi.cols() != w_i.rows() || input.tsi.rows() != n_tok {
                return Err(ModelError::ConfigMismatch(format!(
                    "{label} instance {i}: metadata records are {}x{}, expected {n_tok}x{}",
                    input.tsi.rows(),
                    input.tsi.cols(),
                    w_i.rows()
                )));
            }
        }
    }

    // Encoding layer per instance.
    let w_s_t = g.transpose(bound.w_s)?;
    let mut states: Vec<NodeId> = Vec::with_capacity(inputs.len());
    let mut prior_mats: Vec<Option<Tensor>> = Vec::with_capacity(inputs.len());
    for input in inputs {
        let tokens = g.constant(input.tokens.clone());
        let projected_tokens = g.matmul(tokens, w_s_t)?;
        let u = match (bound.w_i, bound.pos_embed) {
            (Some(w_i), None) => {
                let tsi = g.constant(input.tsi.clone());
                let projected_meta = g.matmul(tsi, w_i)?;
                g.add(projected_meta, projected_tokens)?
            }
            (None, Some(pos)) => g.add(pos, projected_tokens)?,
            _ => unreachable!("branch params carry exactly one positional source"),
        };
        states.push(u);
        prior_mats.push(if use_prior {
            Some(prior_matrix(&input.priors)?)
        } else {
            None
        });
    }

    let mut bn_nodes = Vec::new();
    let mut received_attention = vec![Vec::new(); inputs.len()];
    let last_layer = bound.layers.len() - 1;
    for (l, layer) in bound.layers.iter().enumerate() {
        let layer_params = &params.layers[l];
        let mut residuals = Vec::with_capacity(states.len());
        for (i, &x) in states.iter().enumerate() {
            let mut head_outputs = Vec::with_capacity(N_HEADS);
            let mut recv = vec![0.0; n_tok];
            for head in &layer.heads {
                let q = g.matmul(x, head[0])?;
                let k = g.matmul(x, head[1])?;
                let v = g.matmul(x, head[2])?;
                let att = g.attention(q, k, v, prior_mats[i].as_ref())?;
                if capture_attention && l == last_layer {
                    let w = g.attention_weights(att).expect("attention node");
                    for r in 0..n_tok {
                        for (c, slot) in recv.iter_mut().enumerate() {
                            *slot += w.at(r, c);
                        }
                    }
                }
                head_outputs.push(att);
            }
            if capture_attention && l == last_layer {
                for v in &mut recv {
                    *v /= (n_tok * N_HEADS) as f64;
                }
                received_attention[i] = recv;
            }
            let concat = g.concat_cols(&head_outputs)?;
            let projected = g.matmul(concat, layer.w_o)?;
            residuals.push(g.add(x, projected)?);
        }

        let stacked = g.vstack(&residuals)?;
        let normed = apply_bn(g, stacked, layer.bn1, &layer_params.bn1_state, phase, &mut bn_nodes)?;
        let hidden = g.matmul(normed, layer.ffn_w1)?;
        let hidden = g.relu(hidden)?;
        let ff = g.matmul(hidden, layer.ffn_w2)?;
        let residual2 = g.add(normed, ff)?;
        let normed2 = apply_bn(g, residual2, layer.bn2, &layer_params.bn2_state, phase, &mut bn_nodes)?;

        states = (0..inputs.len())
            .map(|i| g.slice_rows(normed2, i * n_tok, n_tok))
            .collect::<Result<_, _>>()?;
    }

    let pooled = states
        .iter()
        .map(|&x| g.mean_rows(x))
        .collect::<Result<_, _>>()?;
    Ok(BranchOutcome {
        pooled,
        bn_nodes,
        received_attention,
    })
}

fn apply_bn(
    g: &mut Graph,
    x: NodeId,
    affine: [NodeId; 2],
    state: &BnState,
    phase: Phase,
    bn_nodes: &mut Vec<NodeId>,
) -> Result<NodeId, ModelError> {
    let node = match phase {
        Phase::Train => {
            let node = g.batch_norm_train(x, affine[0], affine[1])?;
            bn_nodes.push(node);
            node
        }
        Phase::Eval => {
            g.batch_norm_eval(x, affine[0], affine[1], &state.running_mean, &state.running_var)?
        }
    };
    Ok(node)
}

/// Everything the caller needs after a forward pass. Forward values (class
/// probabilities, gates, attention) must be read before `backward` frees the
/// intermediates; `probs` stays readable through `Graph::value` until then.
pub struct ForwardArtifacts {
    /// Batch class probabilities, batch x C.
    pub probs: NodeId,
    /// Per-instance shape/value gate; 1 for shape-only, 0 for value-only.
    pub lambdas: Vec<f64>,
    /// Train-phase batch-norm nodes in `bn_states` order, for running-stat
    /// updates after the step.
    pub bn_nodes: Vec<NodeId>,
    /// Mean received attention per token (final layer, averaged over heads),
    /// per instance; filled only when capture was requested.
    pub shape_attention: Vec<Vec<f64>>,
    pub value_attention: Vec<Vec<f64>>,
}

/// Build the full forward graph for one batch.
pub fn model_forward(
    g: &mut Graph,
    params: &ModelParams,
    bound: &BoundParams,
    inputs: &ModelInputs,
    phase: Phase,
    capture_attention: bool,
) -> Result<ForwardArtifacts, ModelError> {
    let mode = params.config.mode;
    let batch = inputs.batch_size();
    if batch == 0 {
        return Err(ModelError::ConfigMismatch("empty batch".into()));
    }
    if mode.uses_shape_branch() != inputs.shape.is_some()
        || mode.uses_value_branch() != inputs.value.is_some()
    {
        return Err(ModelError::ConfigMismatch(format!(
            "mode {} expects shape={} value={} inputs",
            mode.name(),
            mode.uses_shape_branch(),
            mode.uses_value_branch()
        )));
    }
    if let (Some(s), Some(v)) = (&inputs.shape, &inputs.value) {
        if s.len() != v.len() {
            return Err(ModelError::ConfigMismatch(format!(
                "shape batch {} != value batch {}",
                s.len(),
                v.len()
            )));
        }
    }

    let use_prior = mode.prior_in_attention();
    let shape_out = match (&params.shape, &bound.shape, &inputs.shape) {
        (Some(p), Some(b), Some(i)) => Some(branch_forward(
            g,
            "shape branch",
            p,
            b,
            i,
            params.config.n_shape_tokens,
            use_prior,
            phase,
            capture_attention,
        )?),
        _ => None,
    };
    let value_out = match (&params.value, &bound.value, &inputs.value) {
        (Some(p), Some(b), Some(i)) => Some(branch_forward(
            g,
            "value branch",
            p,
            b,
            i,
            params.config.n_value_tokens,
            use_prior,
            phase,
            capture_attention,
        )?),
        _ => None,
    };

    let mut lambdas = Vec::with_capacity(batch);
    let mut prob_rows = Vec::with_capacity(batch);
    match (&shape_out, &value_out) {
        (Some(s), Some(v)) => {
            let w_shape_t = g.transpose(bound.w_shape_head.expect("gated mode"))?;
            let w_value_t = g.transpose(bound.w_value_head.expect("gated mode"))?;
            let w_gate_t = g.transpose(bound.w_gate.expect("gated mode"))?;
            let b_gate = bound.b_gate.expect("gated mode");
            for i in 0..batch {
                let concat = g.concat_cols(&[s.pooled[i], v.pooled[i]])?;
                let gate_pre = g.matmul(concat, w_gate_t)?;
                let gate_pre = g.add(gate_pre, b_gate)?;
                let lambda = g.sigmoid(gate_pre)?;
                lambdas.push(g.value(lambda).scalar_value());
                let shape_logits = g.matmul(s.pooled[i], w_shape_t)?;
                let value_logits = g.matmul(v.pooled[i], w_value_t)?;
                let weighted_shape = g.mul_scalar(shape_logits, lambda)?;
                let complement = g.affine(lambda, -1.0, 1.0)?;
                let weighted_value = g.mul_scalar(value_logits, complement)?;
                let fused = g.add(weighted_shape, weighted_value)?;
                prob_rows.push(g.softmax_rows(fused)?);
            }
        }
        (Some(s), None) => {
            let w_t = g.transpose(bound.w_shape_head.expect("shape head"))?;
            for i in 0..batch {
                let logits = g.matmul(s.pooled[i], w_t)?;
                prob_rows.push(g.softmax_rows(logits)?);
                lambdas.push(1.0);
            }
        }
        (None, Some(v)) => {
            let w_t = g.transpose(bound.w_value_head.expect("value head"))?;
            for i in 0..batch {
                let logits = g.matmul(v.pooled[i], w_t)?;
                prob_rows.push(g.softmax_rows(logits)?);
                lambdas.push(0.0);
            }
        }
        (None, None) => unreachable!("at least one branch is always active"),
    }
    let probs = g.vstack(&prob_rows)?;

    let mut bn_nodes = Vec::new();
    if let Some(s) = &shape_out {
        bn_nodes.extend_from_slice(&s.bn_nodes);
    }
    if let Some(v) = &value_out {
        bn_nodes.extend_from_slice(&v.bn_nodes);
    }
    Ok(ForwardArtifacts {
        probs,
        lambdas,
        bn_nodes,
        shape_attention: shape_out.map(|s| s.received_attention).unwrap_or_default(),
        value_attention: value_out.map(|v| v.received_attention).unwrap_or_default(),
    })
}
