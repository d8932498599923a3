use crate::tensor::Tensor;
use crate::{NumericsError, Result};

const BN_EPS: f64 = 1e-5;
const CE_FLOOR: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf { trainable: bool },
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Affine { x: NodeId, mul: f64 },
    SumAll(NodeId),
    MeanRows(NodeId),
    SoftmaxRows(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    ConcatCols(Vec<NodeId>),
    VStack(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize, rows: usize },
    MulScalar { x: NodeId, s: NodeId },
    BatchNormTrain { x: NodeId, gamma: NodeId, beta: NodeId },
    BatchNormEval { x: NodeId, gamma: NodeId, beta: NodeId },
    Attention { q: NodeId, k: NodeId, v: NodeId },
    CrossEntropy { probs: NodeId, labels: Vec<usize> },
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::Matmul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Add(..) => "add",
        Op::Hadamard(..) => "hadamard",
        Op::Affine { .. } => "affine",
        Op::SumAll(..) => "sum",
        Op::MeanRows(..) => "mean_rows",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::Relu(..) => "relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::ConcatCols(..) => "concat_cols",
        Op::VStack(..) => "vstack",
        Op::SliceRows { .. } => "slice_rows",
        Op::MulScalar { .. } => "mul_scalar",
        Op::BatchNormTrain { .. } => "batch_norm",
        Op::BatchNormEval { .. } => "batch_norm_eval",
        Op::Attention { .. } => "attention",
        Op::CrossEntropy { .. } => "cross_entropy",
    }
}

/// Per-node extras the backward pass (or the caller) needs beyond the value.
#[derive(Clone, Debug)]
enum Aux {
    None,
    /// Normalization statistics actually used in the forward pass.
    BatchNorm { mean: Tensor, var: Tensor },
    /// `post` is the row-stochastic matrix multiplied with V. In
    /// prior-enhanced mode `pre` holds the first softmax and `prior` the
    /// constant prior-product matrix; vanilla attention leaves both empty.
    Attention {
        post: Tensor,
        pre: Option<Tensor>,
        prior: Option<Tensor>,
        scale: f64,
    },
}

struct Node {
    op: Op,
    value: Option<Tensor>,
    grad: Option<Tensor>,
    aux: Aux,
    requires_grad: bool,
}

/// Eager Wengert tape: every op computes its value on insertion; `backward`
/// replays the tape in reverse, accumulating gradients into trainable leaves.
///
/// Non-leaf values and gradients are freed as the reverse sweep passes them,
/// so peak memory stays close to the forward footprint. Read any forward
/// value you need (predictions, attention weights) before calling `backward`.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node. Panics if it was freed by `backward`.
    pub fn value(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("node value was freed by backward")
    }

    /// Gradient of the most recent `backward` loss w.r.t. this node.
    /// Present only for trainable leaves after `backward`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// The final row-stochastic attention matrix of an attention node.
    pub fn attention_weights(&self, id: NodeId) -> Option<&Tensor> {
        match &self.nodes[id.0].aux {
            Aux::Attention { post, .. } => Some(post),
            _ => None,
        }
    }

    /// Batch statistics (mean, population variance) a train-mode batch-norm
    /// node normalized with. Survives `backward` so the caller can update
    /// running statistics after the step.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&Tensor, &Tensor)> {
        match &self.nodes[id.0].aux {
            Aux::BatchNorm { mean, var } => Some((mean, var)),
            _ => None,
        }
    }

    fn input_requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn push(&mut self, op: Op, value: Tensor, aux: Aux, requires_grad: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite { op: op_name(&op) });
        }
        self.nodes.push(Node {
            op,
            value: Some(value),
            grad: None,
            aux,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { trainable: false }, value, Aux::None, false)
            .expect("constant leaves accept any finite tensor")
    }

    pub fn param(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf { trainable: true }, value, Aux::None, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let req = self.input_requires(&[a, b]);
        self.push(Op::Matmul(a, b), v, Aux::None, req)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose()?;
        let req = self.input_requires(&[a]);
        self.push(Op::Transpose(a), v, Aux::None, req)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let req = self.input_requires(&[a, b]);
        self.push(Op::Add(a, b), v, Aux::None, req)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        let req = self.input_requires(&[a, b]);
        self.push(Op::Hadamard(a, b), v, Aux::None, req)
    }

    /// Elementwise `mul * x + add` with f64 constants.
    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> Result<NodeId> {
        let v = self.value(x).map(|v| mul * v + add);
        let req = self.input_requires(&[x]);
        self.push(Op::Affine { x, mul }, v, Aux::None, req)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.affine(x, c, 0.0)
    }

    /// Sum of all entries, as a 1x1 tensor.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(x).sum());
        let req = self.input_requires(&[x]);
        self.push(Op::SumAll(x), v, Aux::None, req)
    }

    /// Column means: [r x c] -> [1 x c].
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        require_2d(xv, "mean_rows")?;
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (j, slot) in out.iter_mut().enumerate() {
                *slot += xv.at(i, j);
            }
        }
        for v in out.iter_mut() {
            *v /= r as f64;
        }
        let v = Tensor::new(vec![1, c], out)?;
        let req = self.input_requires(&[x]);
        self.push(Op::MeanRows(x), v, Aux::None, req)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).softmax_rows()?;
        let req = self.input_requires(&[x]);
        self.push(Op::SoftmaxRows(x), v, Aux::None, req)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|v| v.max(0.0));
        let req = self.input_requires(&[x]);
        self.push(Op::Relu(x), v, Aux::None, req)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        let req = self.input_requires(&[x]);
        self.push(Op::Sigmoid(x), v, Aux::None, req)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.value(parts[0]).rows();
        for &p in parts {
            let pv = self.value(p);
            require_2d(pv, "concat_cols")?;
            if pv.rows() != rows {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts differ: {} vs {}", rows, pv.rows()),
                });
            }
        }
        let total_cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = vec![0.0; rows * total_cols];
        let mut col_off = 0;
        for &p in parts {
            let pv = self.value(p);
            let c = pv.cols();
            for i in 0..rows {
                out[i * total_cols + col_off..i * total_cols + col_off + c]
                    .copy_from_slice(pv.row_slice(i));
            }
            col_off += c;
        }
        let v = Tensor::new(vec![rows, total_cols], out)?;
        let req = self.input_requires(parts);
        self.push(Op::ConcatCols(parts.to_vec()), v, Aux::None, req)
    }

    pub fn vstack(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            require_2d(pv, "vstack")?;
            if pv.cols() != cols {
                return Err(NumericsError::ShapeMismatch {
                    op: "vstack",
                    detail: format!("column counts differ: {} vs {}", cols, pv.cols()),
                });
            }
            out.extend_from_slice(pv.data());
        }
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let v = Tensor::new(vec![rows, cols], out)?;
        let req = self.input_requires(parts);
        self.push(Op::VStack(parts.to_vec()), v, Aux::None, req)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, rows: usize) -> Result<NodeId> {
        let xv = self.value(x);
        require_2d(xv, "slice_rows")?;
        if start + rows > xv.rows() {
            return Err(NumericsError::ShapeMismatch {
                op: "slice_rows",
                detail: format!(
                    "rows {}..{} out of bounds for {}",
                    start,
                    start + rows,
                    xv.rows()
                ),
            });
        }
        let c = xv.cols();
        let data = xv.data()[start * c..(start + rows) * c].to_vec();
        let v = Tensor::new(vec![rows, c], data)?;
        let req = self.input_requires(&[x]);
        self.push(Op::SliceRows { x, start, rows }, v, Aux::None, req)
    }

    /// Broadcast multiply by a 1x1 node.
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.value(s);
        if !sv.is_scalar() {
            return Err(NumericsError::ShapeMismatch {
                op: "mul_scalar",
                detail: format!("scalar operand has shape {:?}", sv.shape()),
            });
        }
        let c = sv.scalar_value();
        let v = self.value(x).map(|v| c * v);
        let req = self.input_requires(&[x, s]);
        self.push(Op::MulScalar { x, s }, v, Aux::None, req)
    }

    /// Train-mode batch normalization over rows: every column of `x` is
    /// standardized with the batch mean and population variance, then scaled
    /// by `gamma` and shifted by `beta` (both 1 x features). The statistics
    /// are retained on the node for running-average updates.
    pub fn batch_norm_train(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        require_2d(xv, "batch_norm")?;
        let (r, c) = (xv.rows(), xv.cols());
        if r < 2 {
            return Err(NumericsError::SingletonBatch);
        }
        check_bn_affine(self.value(gamma), self.value(beta), c)?;
        let mut mean = vec![0.0; c];
        for i in 0..r {
            for (j, slot) in mean.iter_mut().enumerate() {
                *slot += xv.at(i, j);
            }
        }
        for m in mean.iter_mut() {
            *m /= r as f64;
        }
        let mut var = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                let d = xv.at(i, j) - mean[j];
                var[j] += d * d;
            }
        }
        for v in var.iter_mut() {
            *v /= r as f64;
        }
        let v = bn_apply(xv, &mean, &var, self.value(gamma), self.value(beta))?;
        let aux = Aux::BatchNorm {
            mean: Tensor::new(vec![1, c], mean)?,
            var: Tensor::new(vec![1, c], var)?,
        };
        let req = self.input_requires(&[x, gamma, beta]);
        self.push(Op::BatchNormTrain { x, gamma, beta }, v, aux, req)
    }

    /// Eval-mode batch normalization with frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Tensor,
        running_var: &Tensor,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        require_2d(xv, "batch_norm_eval")?;
        let c = xv.cols();
        check_bn_affine(self.value(gamma), self.value(beta), c)?;
        if running_mean.numel() != c || running_var.numel() != c {
            return Err(NumericsError::ShapeMismatch {
                op: "batch_norm_eval",
                detail: format!("running stats do not cover {c} features"),
            });
        }
        let v = bn_apply(
            xv,
            running_mean.data(),
            running_var.data(),
            self.value(gamma),
            self.value(beta),
        )?;
        let aux = Aux::BatchNorm {
            mean: running_mean.clone(),
            var: running_var.clone(),
        };
        let req = self.input_requires(&[x, gamma, beta]);
        self.push(Op::BatchNormEval { x, gamma, beta }, v, aux, req)
    }

    /// Scaled dot-product attention over one head.
    ///
    /// With `prior = None` this is vanilla attention,
    /// `softmax(Q K^T / sqrt(d)) V`. With a prior-product matrix `P` the
    /// score distribution is reweighted elementwise and renormalized by a
    /// second softmax: `softmax(softmax(Q K^T / sqrt(d)) . P) V`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        prior: Option<&Tensor>,
    ) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        require_2d(qv, "attention")?;
        require_2d(kv, "attention")?;
        require_2d(vv, "attention")?;
        let n = qv.rows();
        if kv.rows() != n || vv.rows() != n || kv.cols() != qv.cols() {
            return Err(NumericsError::ShapeMismatch {
                op: "attention",
                detail: format!(
                    "q {:?}, k {:?}, v {:?}",
                    qv.shape(),
                    kv.shape(),
                    vv.shape()
                ),
            });
        }
        if let Some(p) = prior {
            if p.shape() != [n, n] {
                return Err(NumericsError::ShapeMismatch {
                    op: "attention",
                    detail: format!("prior {:?} for {n} tokens", p.shape()),
                });
            }
        }
        let scale = 1.0 / (qv.cols() as f64).sqrt();
        let scores = qv.matmul_nt(kv)?.scale(scale);
        let first = scores.softmax_rows()?;
        let (post, pre) = match prior {
            Some(p) => (first.hadamard(p)?.softmax_rows()?, Some(first)),
            None => (first, None),
        };
        let out = post.matmul(vv)?;
        let aux = Aux::Attention {
            post,
            pre,
            prior: prior.cloned(),
            scale,
        };
        let req = self.input_requires(&[q, k, v]);
        self.push(Op::Attention { q, k, v }, out, aux, req)
    }

    /// Mean negative log-likelihood of already-normalized class
    /// probabilities. Rows must sum to 1 within 1e-6; probabilities are
    /// floored at 1e-12 before the log.
    pub fn cross_entropy(&mut self, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
        let pv = self.value(probs);
        require_2d(pv, "cross_entropy")?;
        let (r, c) = (pv.rows(), pv.cols());
        if labels.len() != r {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{} labels for {} rows", labels.len(), r),
            });
        }
        for (i, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(NumericsError::LabelOutOfRange {
                    label,
                    classes: c,
                });
            }
            let sum: f64 = pv.row_slice(i).iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(NumericsError::UnnormalizedProbs { row: i, sum });
            }
        }
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            loss -= pv.at(i, label).max(CE_FLOOR).ln();
        }
        loss /= r as f64;
        let req = self.input_requires(&[probs]);
        self.push(
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            Tensor::scalar(loss),
            Aux::None,
            req,
        )
    }

    fn accum(&mut self, id: NodeId, delta: Tensor) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                *g = g.add(&delta).expect("gradient shape is fixed per node");
            }
            None => node.grad = Some(delta),
        }
    }

    /// Reverse sweep from a scalar loss node. Gradients of trainable leaves
    /// are retained and can be read with `grad`; intermediate values are
    /// freed as the sweep passes them.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        assert!(
            !self.backward_done,
            "backward may only run once per graph"
        );
        self.backward_done = true;
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.nodes[loss.0].grad = Some(Tensor::ones(lv.shape()));

        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.dispatch(idx, &g)?;
            // Free what the sweep no longer needs.
            self.nodes[idx].value = None;
            if matches!(self.nodes[idx].aux, Aux::Attention { .. }) {
                self.nodes[idx].aux = Aux::None;
            }
        }

        for node in &self.nodes {
            if let (Op::Leaf { trainable: true }, Some(g)) = (&node.op, &node.grad) {
                if !g.all_finite() {
                    return Err(NumericsError::NonFinite { op: "backward" });
                }
            }
        }
        Ok(())
    }

    fn dispatch(&mut self, idx: usize, g: &Tensor) -> Result<()> {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf { .. } => {}
            Op::Matmul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let da = g.matmul_nt(self.value(b))?;
                    self.accum(a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let db = self.value(a).matmul_tn(g)?;
                    self.accum(b, db);
                }
            }
            Op::Transpose(a) => {
                let da = g.transpose()?;
                self.accum(a, da);
            }
            Op::Add(a, b) => {
                self.accum(a, g.clone());
                self.accum(b, g.clone());
            }
            Op::Hadamard(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let da = g.hadamard(self.value(b))?;
                    self.accum(a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let db = g.hadamard(self.value(a))?;
                    self.accum(b, db);
                }
            }
            Op::Affine { x, mul } => {
                self.accum(x, g.scale(mul));
            }
            Op::SumAll(x) => {
                let shape = self.value(x).shape().to_vec();
                self.accum(x, Tensor::full(&shape, g.scalar_value()));
            }
            Op::MeanRows(x) => {
                let xv = self.value(x);
                let (r, c) = (xv.rows(), xv.cols());
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g.data()[j] / r as f64;
                    }
                }
                self.accum(x, Tensor::new(vec![r, c], dx)?);
            }
            Op::SoftmaxRows(x) => {
                let y = self.nodes[idx].value.as_ref().expect("softmax output");
                let dx = softmax_vjp(y, g)?;
                self.accum(x, dx);
            }
            Op::Relu(x) => {
                let dx = self.value(x).zip_map(g, |xv, gv| if xv > 0.0 { gv } else { 0.0 })?;
                self.accum(x, dx);
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[idx].value.as_ref().expect("sigmoid output");
                let dx = y.zip_map(g, |yv, gv| gv * yv * (1.0 - yv))?;
                self.accum(x, dx);
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut col_off = 0;
                for p in parts {
                    let c = self.value(p).cols();
                    if self.nodes[p.0].requires_grad {
                        let mut dp = vec![0.0; rows * c];
                        for i in 0..rows {
                            dp[i * c..(i + 1) * c].copy_from_slice(
                                &g.data()[i * total + col_off..i * total + col_off + c],
                            );
                        }
                        self.accum(p, Tensor::new(vec![rows, c], dp)?);
                    }
                    col_off += c;
                }
            }
            Op::VStack(parts) => {
                let cols = g.cols();
                let mut row_off = 0;
                for p in parts {
                    let r = self.value(p).rows();
                    if self.nodes[p.0].requires_grad {
                        let dp = g.data()[row_off * cols..(row_off + r) * cols].to_vec();
                        self.accum(p, Tensor::new(vec![r, cols], dp)?);
                    }
                    row_off += r;
                }
            }
            Op::SliceRows { x, start, rows } => {
                let xv = self.value(x);
                let (r, c) = (xv.rows(), xv.cols());
                let mut dx = vec![0.0; r * c];
                dx[start * c..(start + rows) * c].copy_from_slice(g.data());
                self.accum(x, Tensor::new(vec![r, c], dx)?);
            }
            Op::MulScalar { x, s } => {
                let sv = self.value(s).scalar_value();
                if self.nodes[x.0].requires_grad {
                    self.accum(x, g.scale(sv));
                }
                if self.nodes[s.0].requires_grad {
                    let ds = g.hadamard(self.value(x))?.sum();
                    self.accum(s, Tensor::scalar(ds));
                }
            }
            Op::BatchNormTrain { x, gamma, beta } => {
                let (mean, var) = match &self.nodes[idx].aux {
                    Aux::BatchNorm { mean, var } => (mean.clone(), var.clone()),
                    _ => unreachable!("batch norm node keeps its statistics"),
                };
                self.bn_backward(x, gamma, beta, &mean, &var, g, true)?;
            }
            Op::BatchNormEval { x, gamma, beta } => {
                let (mean, var) = match &self.nodes[idx].aux {
                    Aux::BatchNorm { mean, var } => (mean.clone(), var.clone()),
                    _ => unreachable!("batch norm node keeps its statistics"),
                };
                self.bn_backward(x, gamma, beta, &mean, &var, g, false)?;
            }
            Op::Attention { q, k, v } => {
                let (post, pre, prior, scale) = match &self.nodes[idx].aux {
                    Aux::Attention {
                        post,
                        pre,
                        prior,
                        scale,
                    } => (post.clone(), pre.clone(), prior.clone(), *scale),
                    _ => unreachable!("attention node keeps its weights"),
                };
                let vv = self.value(v);
                let dv = post.matmul_tn(g)?;
                let d_post = g.matmul_nt(vv)?;
                let d_scores = match (pre, prior) {
                    (Some(first), Some(p)) => {
                        let d_weighted = softmax_vjp(&post, &d_post)?;
                        let d_first = d_weighted.hadamard(&p)?;
                        softmax_vjp(&first, &d_first)?
                    }
                    _ => softmax_vjp(&post, &d_post)?,
                };
                if self.nodes[q.0].requires_grad {
                    let dq = d_scores.matmul(self.value(k))?.scale(scale);
                    self.accum(q, dq);
                }
                if self.nodes[k.0].requires_grad {
                    let dk = d_scores.matmul_tn(self.value(q))?.scale(scale);
                    self.accum(k, dk);
                }
                if self.nodes[v.0].requires_grad {
                    self.accum(v, dv);
                }
            }
            Op::CrossEntropy { probs, labels } => {
                let pv = self.value(probs);
                let (r, c) = (pv.rows(), pv.cols());
                let scale = g.scalar_value() / r as f64;
                let mut dp = vec![0.0; r * c];
                for (i, &label) in labels.iter().enumerate() {
                    let p = pv.at(i, label);
                    if p >= CE_FLOOR {
                        dp[i * c + label] = -scale / p;
                    }
                }
                self.accum(probs, Tensor::new(vec![r, c], dp)?);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_backward(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &Tensor,
        var: &Tensor,
        g: &Tensor,
        train: bool,
    ) -> Result<()> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let gv = self.value(gamma);
        let inv_std: Vec<f64> = var.data().iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

        let mut d_beta = vec![0.0; c];
        let mut d_gamma = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                let xhat = (xv.at(i, j) - mean.data()[j]) * inv_std[j];
                d_beta[j] += g.at(i, j);
                d_gamma[j] += g.at(i, j) * xhat;
            }
        }

        if self.nodes[x.0].requires_grad {
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    let gamma_j = gv.data()[j];
                    dx[i * c + j] = if train {
                        let xhat = (xv.at(i, j) - mean.data()[j]) * inv_std[j];
                        gamma_j
                            * inv_std[j]
                            * (g.at(i, j) - d_beta[j] / r as f64 - xhat * d_gamma[j] / r as f64)
                    } else {
                        gamma_j * inv_std[j] * g.at(i, j)
                    };
                }
            }
            self.accum(x, Tensor::new(vec![r, c], dx)?);
        }
        if self.nodes[gamma.0].requires_grad {
            self.accum(gamma, Tensor::new(vec![1, c], d_gamma)?);
        }
        if self.nodes[beta.0].requires_grad {
            self.accum(beta, Tensor::new(vec![1, c], d_beta)?);
        }
        Ok(())
    }
}

fn require_2d(t: &Tensor, op: &'static str) -> Result<()> {
    if !t.is_2d() {
        return Err(NumericsError::ShapeMismatch {
            op,
            detail: format!("expected 2-D tensor, got shape {:?}", t.shape()),
        });
    }
    Ok(())
}

fn check_bn_affine(gamma: &Tensor, beta: &Tensor, features: usize) -> Result<()> {
    if gamma.numel() != features || beta.numel() != features {
        return Err(NumericsError::ShapeMismatch {
            op: "batch_norm",
            detail: format!(
                "gamma {:?} / beta {:?} for {features} features",
                gamma.shape(),
                beta.shape()
            ),
        });
    }
    Ok(())
}

fn bn_apply(x: &Tensor, mean: &[f64], var: &[f64], gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (r, c) = (x.rows(), x.cols());
    let mut out = vec![0.0; r * c];
    for j in 0..c {
        let inv_std = 1.0 / (var[j] + BN_EPS).sqrt();
        let (gj, bj) = (gamma.data()[j], beta.data()[j]);
        for i in 0..r {
            out[i * c + j] = (x.at(i, j) - mean[j]) * inv_std * gj + bj;
        }
    }
    Tensor::new(vec![r, c], out)
}

/// VJP of a row-wise softmax given its output `y` and upstream `dy`:
/// `dx = y .* (dy - rowsum(dy .* y))`.
fn softmax_vjp(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    let (r, c) = (y.rows(), y.cols());
    let mut dx = vec![0.0; r * c];
    for i in 0..r {
        let yr = y.row_slice(i);
        let dyr = dy.row_slice(i);
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for j in 0..c {
            dx[i * c + j] = yr[j] * (dyr[j] - dot);
        }
    }
    Tensor::new(vec![r, c], dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]).unwrap())
            .unwrap();
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn quadratic_gradient_is_x() {
        let t = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let mut g = Graph::new();
        let x = g.param(t.clone()).unwrap();
        let xx = g.hadamard(x, x).unwrap();
        let s = g.sum_all(xx).unwrap();
        let loss = g.scale(s, 0.5).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap();
        for (a, b) in grad.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 2])).unwrap();
        let y = g.relu(x).unwrap();
        assert!(matches!(
            g.backward(y),
            Err(NumericsError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn cross_entropy_values() {
        // uniform prediction over C classes -> ln C
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![1, 4], vec![0.25; 4]).unwrap());
        let loss = g.cross_entropy(p, &[2]).unwrap();
        assert!((g.value(loss).scalar_value() - 4.0_f64.ln()).abs() < 1e-12);

        // perfect one-hot prediction -> essentially zero
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let loss = g.cross_entropy(p, &[0]).unwrap();
        assert!(g.value(loss).scalar_value() <= -(1.0 - 1e-12_f64).ln() + 1e-15);

        // direct evaluation
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![1, 2], vec![0.8, 0.2]).unwrap());
        let loss = g.cross_entropy(p, &[0]).unwrap();
        assert!((g.value(loss).scalar_value() - 0.22314355131420976).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap());
        assert!(matches!(
            g.cross_entropy(p, &[2]),
            Err(NumericsError::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn cross_entropy_requires_normalized_rows() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![1, 2], vec![0.7, 0.7]).unwrap());
        assert!(matches!(
            g.cross_entropy(p, &[0]),
            Err(NumericsError::UnnormalizedProbs { .. })
        ));
    }

    #[test]
    fn batch_norm_train_standardizes_columns() {
        let mut rng = crate::rng::SplitMix64::new(17);
        let x = Tensor::new(vec![64, 3], (0..192).map(|_| rng.uniform(-5.0, 9.0)).collect())
            .unwrap();
        let mut g = Graph::new();
        let xn = g.constant(x);
        let gamma = g.constant(Tensor::ones(&[1, 3]));
        let beta = g.constant(Tensor::zeros(&[1, 3]));
        let y = g.batch_norm_train(xn, gamma, beta).unwrap();
        let yv = g.value(y);
        for j in 0..3 {
            let mut mean = 0.0;
            for i in 0..64 {
                mean += yv.at(i, j);
            }
            mean /= 64.0;
            let mut var = 0.0;
            for i in 0..64 {
                var += (yv.at(i, j) - mean) * (yv.at(i, j) - mean);
            }
            var /= 64.0;
            assert!(mean.abs() < 1e-9, "column mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "column variance {var}");
        }
    }

    #[test]
    fn batch_norm_constant_column_maps_to_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![4, 1], vec![5.0; 4]).unwrap());
        let gamma = g.constant(Tensor::ones(&[1, 1]));
        let beta = g.constant(Tensor::zeros(&[1, 1]));
        let y = g.batch_norm_train(x, gamma, beta).unwrap();
        for &v in g.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn batch_norm_eval_matches_direct_formula() {
        let x = Tensor::new(vec![2, 2], vec![1.0, 4.0, -2.0, 0.5]).unwrap();
        let mean = Tensor::new(vec![1, 2], vec![0.5, 1.0]).unwrap();
        let var = Tensor::new(vec![1, 2], vec![2.0, 0.25]).unwrap();
        let gamma_v = Tensor::new(vec![1, 2], vec![1.5, -0.5]).unwrap();
        let beta_v = Tensor::new(vec![1, 2], vec![0.1, 0.2]).unwrap();

        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let ga = g.constant(gamma_v.clone());
        let be = g.constant(beta_v.clone());
        let y = g.batch_norm_eval(xn, ga, be, &mean, &var).unwrap();
        let yv = g.value(y);
        for i in 0..2 {
            for j in 0..2 {
                let expect = (x.at(i, j) - mean.data()[j]) / (var.data()[j] + 1e-5).sqrt()
                    * gamma_v.data()[j]
                    + beta_v.data()[j];
                assert!((yv.at(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_norm_singleton_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let gamma = g.constant(Tensor::ones(&[1, 2]));
        let beta = g.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(
            g.batch_norm_train(x, gamma, beta),
            Err(NumericsError::SingletonBatch)
        ));
    }

    #[test]
    fn single_token_attention_returns_value_row() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::new(vec![1, 4], vec![0.3, -1.0, 2.0, 0.7]).unwrap());
        let k = g.constant(Tensor::new(vec![1, 4], vec![1.0, 0.0, -2.0, 0.4]).unwrap());
        let v = g.constant(Tensor::new(vec![1, 4], vec![9.0, -3.0, 0.5, 1.0]).unwrap());
        let p = Tensor::new(vec![1, 1], vec![7.0]).unwrap();
        let out = g.attention(q, k, v, Some(&p)).unwrap();
        assert_eq!(g.value(out), g.value(v));
    }

    #[test]
    fn attention_weight_rows_are_stochastic() {
        let mut rng = crate::rng::SplitMix64::new(23);
        let mut g = Graph::new();
        let q = g.constant(Tensor::new(vec![5, 2], (0..10).map(|_| rng.normal()).collect()).unwrap());
        let k = g.constant(Tensor::new(vec![5, 2], (0..10).map(|_| rng.normal()).collect()).unwrap());
        let v = g.constant(Tensor::new(vec![5, 2], (0..10).map(|_| rng.normal()).collect()).unwrap());
        let prior =
            Tensor::new(vec![5, 5], (0..25).map(|_| rng.uniform(0.0, 3.0)).collect()).unwrap();
        let out = g.attention(q, k, v, Some(&prior)).unwrap();
        let w = g.attention_weights(out).unwrap();
        for i in 0..5 {
            let s: f64 = w.row_slice(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(w.row_slice(i).iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn nan_input_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        // ln of a negative number via affine wouldn't exist; force a NaN with 0/0 via scale of inf
        let inf = g.affine(x, f64::MAX, 0.0);
        // f64::MAX * 2.0 overflows to inf -> rejected
        assert!(matches!(inf, Err(NumericsError::NonFinite { .. })));
    }
}
