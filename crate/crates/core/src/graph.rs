//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of [`Node`]s. Every operation evaluates
//! eagerly and records enough on the tape to replay the chain rule backwards.
//! Node ids are topological by construction: inputs always precede consumers,
//! so [`Graph::backward`] is a single reverse sweep with deterministic
//! accumulation order.
//!
//! Gradient stopping: a node carrying the stop flag accumulates its own
//! gradient (so it can be queried) but never propagates anything to its
//! inputs. That is the entire first-order mechanism used by the meta-trainer.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Batch-normalization statistics source.
#[derive(Debug, Clone)]
pub enum BnMode {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with fixed running statistics (inference).
    Running { mean: Tensor, var: Tensor },
}

/// Operation kinds recordable on the tape.
#[derive(Debug, Clone)]
pub enum Op {
    /// Caller-supplied value. `requires_grad` marks it as a gradient sink.
    Leaf { requires_grad: bool },
    /// Identity forward, zero backward.
    StopGradient,
    Add,
    Sub,
    Mul,
    MatMul,
    /// x + bias, broadcasting a vector over the feature axis ([N,M]+[M]) or
    /// the channel axis ([N,C,H,W]+[C]).
    AddBias,
    Relu,
    Sigmoid,
    Tanh,
    /// sign(x) with sign(0) = 0; derivative is zero everywhere.
    Sign,
    Abs,
    Log,
    ScalarMul(f64),
    /// Binary concatenation along the last axis.
    ConcatLast,
    Reshape(Vec<usize>),
    SliceCols { start: usize, len: usize },
    SliceRows { start: usize, len: usize },
    /// Reduce all elements to a scalar sum.
    Sum,
    /// 2x2 average pooling, stride 2.
    AvgPool2,
    /// Stride-1 same-padding 2-D convolution (odd kernels).
    Conv2dSame,
    BatchNorm { eps: f64, mode: BnMode },
    /// Mean softmax cross-entropy over the batch; inputs (logits, one-hot).
    SoftmaxCrossEntropy,
    /// Fused LSTM cell over row-batched coordinates.
    /// Inputs: x[n,in], h[n,H], c[n,H], wx[in,4H], wh[H,4H], b[4H].
    /// Output: [n,2H] = [h' | c']. Gate order in the fused matrices: input,
    /// forget, candidate, output.
    LstmCell { hidden: usize },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::StopGradient => "stop-gradient",
            Op::Add => "add",
            Op::Sub => "subtract",
            Op::Mul => "elementwise-multiply",
            Op::MatMul => "matmul",
            Op::AddBias => "add-broadcast-bias",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Sign => "sign",
            Op::Abs => "abs",
            Op::Log => "log",
            Op::ScalarMul(_) => "scalar-multiply",
            Op::ConcatLast => "concat-last-axis",
            Op::Reshape(_) => "reshape",
            Op::SliceCols { .. } => "slice-cols",
            Op::SliceRows { .. } => "slice-rows",
            Op::Sum => "sum",
            Op::AvgPool2 => "avg-pool-2x2",
            Op::Conv2dSame => "conv2d",
            Op::BatchNorm { .. } => "batch-norm",
            Op::SoftmaxCrossEntropy => "softmax-cross-entropy",
            Op::LstmCell { .. } => "lstm-cell",
        }
    }
}

pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub value: Tensor,
    /// Values saved by the forward pass for the backward pass.
    cache: Vec<Tensor>,
    /// Stop flag: this node's gradient never reaches its inputs.
    pub stop: bool,
    /// Whether a gradient sink is reachable through this node.
    grad_flow: bool,
}

/// Gradients produced by a backward sweep, indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    /// Batch statistics (mean, var) cached by a batch-mode BatchNorm node.
    pub fn bn_batch_stats(&self, id: NodeId) -> Option<(&Tensor, &Tensor)> {
        let node = &self.nodes[id.0];
        match node.op {
            Op::BatchNorm { mode: BnMode::Batch, .. } => Some((&node.cache[2], &node.cache[3])),
            _ => None,
        }
    }

    /// Insert a leaf holding `value`. `requires_grad` marks it as a sink the
    /// backward sweep must deliver a gradient to.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf { requires_grad },
            inputs: vec![],
            value,
            cache: vec![],
            stop: false,
            grad_flow: requires_grad,
        });
        id
    }

    /// Leaf that no gradient is ever requested for.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    /// Record one operation: validates shapes, evaluates eagerly, appends a
    /// node and returns its id.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        for &i in inputs {
            if i.0 >= self.nodes.len() {
                return Err(Error::UnknownNode(i.0));
            }
        }
        let vals: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i.0].value).collect();
        let (value, cache) = eval_forward(&op, &vals)?;
        let stop = matches!(op, Op::StopGradient);
        // A stop node is a queryable gradient sink itself; other ops pass
        // gradient demand through from their inputs.
        let grad_flow = stop || inputs.iter().any(|&i| self.nodes[i.0].grad_flow);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            value,
            cache,
            stop,
            grad_flow,
        });
        Ok(id)
    }

    // Typed builders.

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::AddBias, &[x, b])
    }
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[x])
    }
    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sigmoid, &[x])
    }
    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Tanh, &[x])
    }
    pub fn sign(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sign, &[x])
    }
    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Abs, &[x])
    }
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Log, &[x])
    }
    pub fn scalar_mul(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.apply(Op::ScalarMul(factor), &[x])
    }
    pub fn concat_last(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::ConcatLast, &[a, b])
    }
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.apply(Op::Reshape(shape), &[x])
    }
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.apply(Op::SliceCols { start, len }, &[x])
    }
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.apply(Op::SliceRows { start, len }, &[x])
    }
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, &[x])
    }
    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::AvgPool2, &[x])
    }
    pub fn conv2d_same(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.apply(Op::Conv2dSame, &[x, w])
    }
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        eps: f64,
        mode: BnMode,
    ) -> Result<NodeId> {
        self.apply(Op::BatchNorm { eps, mode }, &[x, scale, shift])
    }
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, one_hot: NodeId) -> Result<NodeId> {
        self.apply(Op::SoftmaxCrossEntropy, &[logits, one_hot])
    }
    pub fn lstm_cell(
        &mut self,
        x: NodeId,
        h: NodeId,
        c: NodeId,
        wx: NodeId,
        wh: NodeId,
        b: NodeId,
        hidden: usize,
    ) -> Result<NodeId> {
        self.apply(Op::LstmCell { hidden }, &[x, h, c, wx, wh, b])
    }

    /// Forward identity whose backward contribution is zero.
    pub fn stop_gradient(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::StopGradient, &[x])
    }

    /// Reverse sweep from a scalar loss, keeping every computed gradient.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.backward_impl(loss, None)
    }

    /// Reverse sweep that retains gradients only for `keep` (and computes the
    /// minimum needed to reach them); bounds peak memory on long tapes.
    pub fn backward_keep(&self, loss: NodeId, keep: &[NodeId]) -> Result<Gradients> {
        self.backward_impl(loss, Some(keep))
    }

    fn backward_impl(&self, loss: NodeId, keep: Option<&[NodeId]>) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::UnknownNode(loss.0));
        }
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut keep_mask = keep.map(|ids| {
            let mut m = vec![false; self.nodes.len()];
            for &id in ids {
                m[id.0] = true;
            }
            m
        });
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(loss_node.value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(g) = grads[i].clone() else { continue };
            if !node.stop && !node.inputs.is_empty() {
                let needs: Vec<bool> = node
                    .inputs
                    .iter()
                    .map(|&inp| self.nodes[inp.0].grad_flow)
                    .collect();
                if needs.iter().any(|&n| n) {
                    let vals: Vec<&Tensor> =
                        node.inputs.iter().map(|&inp| &self.nodes[inp.0].value).collect();
                    let partials =
                        eval_backward(&node.op, &vals, &node.value, &node.cache, &g, &needs);
                    for (slot, partial) in node.inputs.iter().zip(partials) {
                        if let Some(p) = partial {
                            grads[slot.0] = Some(match grads[slot.0].take() {
                                Some(acc) => acc.add(&p)?,
                                None => p,
                            });
                        }
                    }
                }
            }
            if let Some(mask) = keep_mask.as_mut() {
                if !mask[i] {
                    grads[i] = None;
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradient for `id` from a finished sweep, or zeros of its shape when no
    /// gradient reached it (e.g. a leaf cut off by stop-gradient).
    pub fn grad_or_zeros(&self, grads: &Gradients, id: NodeId) -> Tensor {
        match grads.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[id.0].value.shape()),
        }
    }
}

fn shape_err(op: &Op, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op: op.name(),
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &Op, shape: &[usize], reason: impl Into<String>) -> Error {
    Error::InvalidShape {
        op: op.name(),
        shape: shape.to_vec(),
        reason: reason.into(),
    }
}

fn sign_val(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Evaluate `op` forward; returns the output tensor plus cached values the
/// backward pass needs.
fn eval_forward(op: &Op, inputs: &[&Tensor]) -> Result<(Tensor, Vec<Tensor>)> {
    let arity_ok = match op {
        Op::Leaf { .. } => inputs.is_empty(),
        Op::StopGradient
        | Op::Relu
        | Op::Sigmoid
        | Op::Tanh
        | Op::Sign
        | Op::Abs
        | Op::Log
        | Op::ScalarMul(_)
        | Op::Reshape(_)
        | Op::SliceCols { .. }
        | Op::SliceRows { .. }
        | Op::Sum
        | Op::AvgPool2 => inputs.len() == 1,
        Op::Add | Op::Sub | Op::Mul | Op::MatMul | Op::AddBias | Op::ConcatLast
        | Op::Conv2dSame | Op::SoftmaxCrossEntropy => inputs.len() == 2,
        Op::BatchNorm { .. } => inputs.len() == 3,
        Op::LstmCell { .. } => inputs.len() == 6,
    };
    if !arity_ok {
        return Err(Error::InvalidConfig(format!(
            "{} expects a different input count, got {}",
            op.name(),
            inputs.len()
        )));
    }

    match op {
        Op::Leaf { .. } => unreachable!("leaves are inserted via Graph::leaf"),
        Op::StopGradient => Ok((inputs[0].clone(), vec![])),
        Op::Add => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(shape_err(op, a.shape(), b.shape()));
            }
            Ok((a.add(b)?, vec![]))
        }
        Op::Sub => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(shape_err(op, a.shape(), b.shape()));
            }
            Ok((a.sub(b)?, vec![]))
        }
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(shape_err(op, a.shape(), b.shape()));
            }
            Ok((a.zip_map(b, |x, y| x * y)?, vec![]))
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let ([m, k], [k2, n]) = (dims2(op, a)?, dims2(op, b)?);
            if k != k2 {
                return Err(shape_err(op, a.shape(), b.shape()));
            }
            let c = kernels::matmul(a.data(), b.data(), m, k, n);
            Ok((Tensor::new(vec![m, n], c)?, vec![]))
        }
        Op::AddBias => {
            let (x, b) = (inputs[0], inputs[1]);
            let c = bias_axis_len(op, x)?;
            if b.shape() != [c] {
                return Err(shape_err(op, x.shape(), b.shape()));
            }
            let bd = b.data();
            let out = match x.shape() {
                [_, m] => {
                    let mut v = x.data().to_vec();
                    for row in v.chunks_mut(*m) {
                        for (o, &bj) in row.iter_mut().zip(bd) {
                            *o += bj;
                        }
                    }
                    v
                }
                [_, _, h, w] => {
                    let plane = h * w;
                    let mut v = x.data().to_vec();
                    for (i, o) in v.iter_mut().enumerate() {
                        *o += bd[(i / plane) % c];
                    }
                    v
                }
                _ => unreachable!(),
            };
            Ok((Tensor::new(x.shape().to_vec(), out)?, vec![]))
        }
        Op::Relu => Ok((inputs[0].map(|x| if x > 0.0 { x } else { 0.0 }), vec![])),
        Op::Sigmoid => Ok((
            Tensor::new(
                inputs[0].shape().to_vec(),
                kernels::unary_map(inputs[0].data(), kernels::sigmoid),
            )?,
            vec![],
        )),
        Op::Tanh => Ok((
            Tensor::new(
                inputs[0].shape().to_vec(),
                kernels::unary_map(inputs[0].data(), f64::tanh),
            )?,
            vec![],
        )),
        Op::Sign => Ok((inputs[0].map(sign_val), vec![])),
        Op::Abs => Ok((inputs[0].map(f64::abs), vec![])),
        Op::Log => Ok((inputs[0].map(f64::ln), vec![])),
        Op::ScalarMul(f) => Ok((inputs[0].scale(*f), vec![])),
        Op::ConcatLast => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape().is_empty()
                || a.shape().len() != b.shape().len()
                || a.shape()[..a.shape().len() - 1] != b.shape()[..b.shape().len() - 1]
            {
                return Err(shape_err(op, a.shape(), b.shape()));
            }
            let p = *a.shape().last().unwrap();
            let q = *b.shape().last().unwrap();
            let rows = a.len() / p;
            let mut out = Vec::with_capacity(rows * (p + q));
            for r in 0..rows {
                out.extend_from_slice(&a.data()[r * p..(r + 1) * p]);
                out.extend_from_slice(&b.data()[r * q..(r + 1) * q]);
            }
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = p + q;
            Ok((Tensor::new(shape, out)?, vec![]))
        }
        Op::Reshape(shape) => Ok((inputs[0].reshaped(shape.clone())?, vec![])),
        Op::SliceCols { start, len } => {
            let x = inputs[0];
            let [n, m] = dims2(op, x)?;
            if start + len > m {
                return Err(invalid(op, x.shape(), format!("cols {start}..{} out of range", start + len)));
            }
            let mut out = Vec::with_capacity(n * len);
            for r in 0..n {
                out.extend_from_slice(&x.data()[r * m + start..r * m + start + len]);
            }
            Ok((Tensor::new(vec![n, *len], out)?, vec![]))
        }
        Op::SliceRows { start, len } => {
            let x = inputs[0];
            let [n, m] = dims2(op, x)?;
            if start + len > n {
                return Err(invalid(op, x.shape(), format!("rows {start}..{} out of range", start + len)));
            }
            let out = x.data()[start * m..(start + len) * m].to_vec();
            Ok((Tensor::new(vec![*len, m], out)?, vec![]))
        }
        Op::Sum => Ok((Tensor::scalar(inputs[0].data().iter().sum()), vec![])),
        Op::AvgPool2 => {
            let x = inputs[0];
            let [n, c, h, w] = dims4(op, x)?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(invalid(op, x.shape(), "spatial dims must be even"));
            }
            let y = kernels::avg_pool2(x.data(), n, c, h, w);
            Ok((Tensor::new(vec![n, c, h / 2, w / 2], y)?, vec![]))
        }
        Op::Conv2dSame => {
            let (x, w) = (inputs[0], inputs[1]);
            let [n, cin, h, wd] = dims4(op, x)?;
            let [cout, cin2, kh, kw] = dims4(op, w)?;
            if cin != cin2 || kh % 2 == 0 || kw % 2 == 0 {
                return Err(shape_err(op, x.shape(), w.shape()));
            }
            let y = kernels::conv2d_same(x.data(), w.data(), n, cin, h, wd, cout, kh, kw);
            Ok((Tensor::new(vec![n, cout, h, wd], y)?, vec![]))
        }
        Op::BatchNorm { eps, mode } => {
            let (x, scale, shift) = (inputs[0], inputs[1], inputs[2]);
            let [_, c, _, _] = dims4(op, x)?;
            if scale.shape() != [c] || shift.shape() != [c] {
                return Err(shape_err(op, x.shape(), scale.shape()));
            }
            bn_forward(x, scale, shift, *eps, mode)
        }
        Op::SoftmaxCrossEntropy => {
            let (logits, labels) = (inputs[0], inputs[1]);
            if logits.shape() != labels.shape() {
                return Err(shape_err(op, logits.shape(), labels.shape()));
            }
            let [b, k] = dims2(op, logits)?;
            let mut probs = vec![0.0; b * k];
            let mut total = 0.0;
            for r in 0..b {
                let row = &logits.data()[r * k..(r + 1) * k];
                let y = &labels.data()[r * k..(r + 1) * k];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for &z in row {
                    denom += (z - max).exp();
                }
                let log_denom = denom.ln() + max;
                for j in 0..k {
                    let logp = row[j] - log_denom;
                    probs[r * k + j] = logp.exp();
                    total -= y[j] * logp;
                }
            }
            let loss = total / b as f64;
            Ok((Tensor::scalar(loss), vec![Tensor::new(vec![b, k], probs)?]))
        }
        Op::LstmCell { hidden } => lstm_forward(op, inputs, *hidden),
    }
}

fn dims2(op: &Op, t: &Tensor) -> Result<[usize; 2]> {
    match t.shape() {
        [a, b] => Ok([*a, *b]),
        s => Err(invalid(op, s, "expected rank 2")),
    }
}

fn dims4(op: &Op, t: &Tensor) -> Result<[usize; 4]> {
    match t.shape() {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        s => Err(invalid(op, s, "expected rank 4")),
    }
}

fn bias_axis_len(op: &Op, x: &Tensor) -> Result<usize> {
    match x.shape() {
        [_, m] => Ok(*m),
        [_, c, _, _] => Ok(*c),
        s => Err(invalid(op, s, "expected rank 2 or 4")),
    }
}

fn bn_forward(
    x: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
    eps: f64,
    mode: &BnMode,
) -> Result<(Tensor, Vec<Tensor>)> {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let plane = h * w;
    let per_channel = n * plane;
    let (mean, var) = match mode {
        BnMode::Batch => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for s_idx in 0..n {
                    let base = (s_idx * c + ch) * plane;
                    for v in &x.data()[base..base + plane] {
                        s += v;
                    }
                }
                mean[ch] = s / per_channel as f64;
                let mut sq = 0.0;
                for s_idx in 0..n {
                    let base = (s_idx * c + ch) * plane;
                    for v in &x.data()[base..base + plane] {
                        let d = v - mean[ch];
                        sq += d * d;
                    }
                }
                var[ch] = sq / per_channel as f64;
            }
            (mean, var)
        }
        BnMode::Running { mean, var } => {
            if mean.shape() != [c] || var.shape() != [c] {
                return Err(Error::ShapeMismatch {
                    op: "batch-norm",
                    lhs: x.shape().to_vec(),
                    rhs: mean.shape().to_vec(),
                });
            }
            (mean.data().to_vec(), var.data().to_vec())
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for s_idx in 0..n {
        for ch in 0..c {
            let base = (s_idx * c + ch) * plane;
            let (m, is, g, b2) = (mean[ch], inv_std[ch], scale.data()[ch], shift.data()[ch]);
            for i in base..base + plane {
                let xh = (x.data()[i] - m) * is;
                xhat[i] = xh;
                out[i] = g * xh + b2;
            }
        }
    }
    let cache = vec![
        Tensor::new(x.shape().to_vec(), xhat)?,
        Tensor::vector(&inv_std),
        Tensor::vector(&mean),
        Tensor::vector(&var),
    ];
    Ok((Tensor::new(x.shape().to_vec(), out)?, cache))
}

fn lstm_forward(op: &Op, inputs: &[&Tensor], hidden: usize) -> Result<(Tensor, Vec<Tensor>)> {
    let (x, h, c, wx, wh, b) = (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4], inputs[5]);
    let [n, in_dim] = dims2(op, x)?;
    let hh = hidden;
    if h.shape() != [n, hh]
        || c.shape() != [n, hh]
        || wx.shape() != [in_dim, 4 * hh]
        || wh.shape() != [hh, 4 * hh]
        || b.shape() != [4 * hh]
    {
        return Err(shape_err(op, x.shape(), wx.shape()));
    }
    // Pre-activations for all four gates in one buffer.
    let mut gates = kernels::matmul(x.data(), wx.data(), n, in_dim, 4 * hh);
    kernels::matmul_acc(&mut gates, h.data(), wh.data(), n, hh, 4 * hh);
    let bd = b.data();
    // Bias plus activation in one pass: i, f, candidate, o.
    let act = |row: &mut [f64]| {
        for (j, v) in row.iter_mut().enumerate() {
            let z = *v + bd[j];
            *v = if hh * 2 <= j && j < hh * 3 {
                z.tanh()
            } else {
                kernels::sigmoid(z)
            };
        }
    };
    let combine = |r: usize, out_row: &mut [f64], tc_row: &mut [f64], gates: &[f64], cd: &[f64]| {
        let g = &gates[r * 4 * hh..(r + 1) * 4 * hh];
        let c_prev = &cd[r * hh..(r + 1) * hh];
        for j in 0..hh {
            let (i_g, f_g, cand, o_g) = (g[j], g[hh + j], g[2 * hh + j], g[3 * hh + j]);
            let c_new = f_g * c_prev[j] + i_g * cand;
            let tc = c_new.tanh();
            out_row[j] = o_g * tc; // h'
            out_row[hh + j] = c_new; // c'
            tc_row[j] = tc;
        }
    };
    let mut out = vec![0.0; n * 2 * hh];
    let mut tanh_c = vec![0.0; n * hh];
    let cd = c.data();
    if n * hh >= 1 << 15 {
        gates.par_chunks_mut(4 * hh).for_each(act);
        out.par_chunks_mut(2 * hh)
            .zip(tanh_c.par_chunks_mut(hh))
            .enumerate()
            .for_each(|(r, (out_row, tc_row))| combine(r, out_row, tc_row, &gates, cd));
    } else {
        gates.chunks_mut(4 * hh).for_each(act);
        for (r, (out_row, tc_row)) in out.chunks_mut(2 * hh).zip(tanh_c.chunks_mut(hh)).enumerate() {
            combine(r, out_row, tc_row, &gates, cd);
        }
    }
    let cache = vec![
        Tensor::new(vec![n, 4 * hh], gates)?,
        Tensor::new(vec![n, hh], tanh_c)?,
    ];
    Ok((Tensor::new(vec![n, 2 * hh], out)?, cache))
}

/// Partial derivatives of `op` w.r.t. each input, given the upstream gradient.
/// `needs[i] == false` skips input i and yields `None`.
fn eval_backward(
    op: &Op,
    inputs: &[&Tensor],
    value: &Tensor,
    cache: &[Tensor],
    grad: &Tensor,
    needs: &[bool],
) -> Vec<Option<Tensor>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    match op {
        Op::Leaf { .. } | Op::StopGradient => vec![],
        Op::Add => vec![
            want(0).then(|| grad.clone()),
            want(1).then(|| grad.clone()),
        ],
        Op::Sub => vec![
            want(0).then(|| grad.clone()),
            want(1).then(|| grad.scale(-1.0)),
        ],
        Op::Mul => vec![
            want(0).then(|| grad.zip_map(inputs[1], |g, b| g * b).unwrap()),
            want(1).then(|| grad.zip_map(inputs[0], |g, a| g * a).unwrap()),
        ],
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let da = want(0).then(|| {
                Tensor::new(vec![m, k], kernels::matmul_nt(grad.data(), b.data(), m, n, k))
                    .unwrap()
            });
            let db = want(1).then(|| {
                Tensor::new(vec![k, n], kernels::matmul_tn(a.data(), grad.data(), m, k, n))
                    .unwrap()
            });
            vec![da, db]
        }
        Op::AddBias => {
            let x = inputs[0];
            let dx = want(0).then(|| grad.clone());
            let db = want(1).then(|| {
                let c = inputs[1].shape()[0];
                let mut acc = vec![0.0; c];
                match x.shape() {
                    [_, m] => {
                        for row in grad.data().chunks(*m) {
                            for (a, &g) in acc.iter_mut().zip(row) {
                                *a += g;
                            }
                        }
                    }
                    [_, _, h, w] => {
                        let plane = h * w;
                        for (i, &g) in grad.data().iter().enumerate() {
                            acc[(i / plane) % c] += g;
                        }
                    }
                    _ => unreachable!(),
                }
                Tensor::vector(&acc)
            });
            vec![dx, db]
        }
        Op::Relu => vec![want(0).then(|| {
            grad.zip_map(inputs[0], |g, x| if x > 0.0 { g } else { 0.0 }).unwrap()
        })],
        Op::Sigmoid => vec![want(0).then(|| {
            grad.zip_map(value, |g, y| g * y * (1.0 - y)).unwrap()
        })],
        Op::Tanh => vec![want(0).then(|| {
            grad.zip_map(value, |g, y| g * (1.0 - y * y)).unwrap()
        })],
        Op::Sign => vec![want(0).then(|| Tensor::zeros(inputs[0].shape()))],
        Op::Abs => vec![want(0).then(|| {
            grad.zip_map(inputs[0], |g, x| g * sign_val(x)).unwrap()
        })],
        Op::Log => vec![want(0).then(|| grad.zip_map(inputs[0], |g, x| g / x).unwrap())],
        Op::ScalarMul(f) => vec![want(0).then(|| grad.scale(*f))],
        Op::ConcatLast => {
            let p = *inputs[0].shape().last().unwrap();
            let q = *inputs[1].shape().last().unwrap();
            let rows = inputs[0].len() / p;
            let da = want(0).then(|| {
                let mut out = Vec::with_capacity(rows * p);
                for r in 0..rows {
                    out.extend_from_slice(&grad.data()[r * (p + q)..r * (p + q) + p]);
                }
                Tensor::new(inputs[0].shape().to_vec(), out).unwrap()
            });
            let db = want(1).then(|| {
                let mut out = Vec::with_capacity(rows * q);
                for r in 0..rows {
                    out.extend_from_slice(&grad.data()[r * (p + q) + p..(r + 1) * (p + q)]);
                }
                Tensor::new(inputs[1].shape().to_vec(), out).unwrap()
            });
            vec![da, db]
        }
        Op::Reshape(_) => vec![want(0).then(|| {
            grad.reshaped(inputs[0].shape().to_vec()).unwrap()
        })],
        Op::SliceCols { start, len } => vec![want(0).then(|| {
            let [n, m] = [inputs[0].shape()[0], inputs[0].shape()[1]];
            let mut out = vec![0.0; n * m];
            for r in 0..n {
                out[r * m + start..r * m + start + len]
                    .copy_from_slice(&grad.data()[r * len..(r + 1) * len]);
            }
            Tensor::new(vec![n, m], out).unwrap()
        })],
        Op::SliceRows { start, len } => vec![want(0).then(|| {
            let [n, m] = [inputs[0].shape()[0], inputs[0].shape()[1]];
            let mut out = vec![0.0; n * m];
            out[start * m..(start + len) * m].copy_from_slice(grad.data());
            Tensor::new(vec![n, m], out).unwrap()
        })],
        Op::Sum => vec![want(0).then(|| Tensor::full(inputs[0].shape(), grad.item()))],
        Op::AvgPool2 => vec![want(0).then(|| {
            let [n, c, h, w] = [
                inputs[0].shape()[0],
                inputs[0].shape()[1],
                inputs[0].shape()[2],
                inputs[0].shape()[3],
            ];
            Tensor::new(
                inputs[0].shape().to_vec(),
                kernels::avg_pool2_grad(grad.data(), n, c, h, w),
            )
            .unwrap()
        })],
        Op::Conv2dSame => {
            let (x, w) = (inputs[0], inputs[1]);
            let [n, cin, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
            let [cout, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
            let dx = want(0).then(|| {
                Tensor::new(
                    x.shape().to_vec(),
                    kernels::conv2d_same_grad_x(grad.data(), w.data(), n, cin, h, wd, cout, kh, kw),
                )
                .unwrap()
            });
            let dw = want(1).then(|| {
                Tensor::new(
                    w.shape().to_vec(),
                    kernels::conv2d_same_grad_w(grad.data(), x.data(), n, cin, h, wd, cout, kh, kw),
                )
                .unwrap()
            });
            vec![dx, dw]
        }
        Op::BatchNorm { mode, .. } => bn_backward(inputs, cache, grad, needs, mode),
        Op::SoftmaxCrossEntropy => {
            let probs = &cache[0];
            let labels = inputs[1];
            let b = probs.shape()[0] as f64;
            let gscale = grad.item() / b;
            let dlogits = want(0).then(|| {
                probs
                    .zip_map(labels, |p, y| (p - y) * gscale)
                    .unwrap()
            });
            let dlabels = want(1).then(|| probs.map(|p| -p.ln() * gscale));
            vec![dlogits, dlabels]
        }
        Op::LstmCell { hidden } => lstm_backward(inputs, cache, grad, needs, *hidden),
    }
}

fn bn_backward(
    inputs: &[&Tensor],
    cache: &[Tensor],
    grad: &Tensor,
    needs: &[bool],
    mode: &BnMode,
) -> Vec<Option<Tensor>> {
    let x = inputs[0];
    let scale = inputs[1];
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let plane = h * w;
    let m = (n * plane) as f64;
    let xhat = &cache[0];
    let inv_std = &cache[1];

    // Per-channel reductions of dy and dy*xhat.
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    for s_idx in 0..n {
        for ch in 0..c {
            let base = (s_idx * c + ch) * plane;
            for i in base..base + plane {
                sum_dy[ch] += grad.data()[i];
                sum_dy_xhat[ch] += grad.data()[i] * xhat.data()[i];
            }
        }
    }
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    let dx = want(0).then(|| {
        let mut out = vec![0.0; x.len()];
        match mode {
            BnMode::Batch => {
                for s_idx in 0..n {
                    for ch in 0..c {
                        let base = (s_idx * c + ch) * plane;
                        let (g, is) = (scale.data()[ch], inv_std.data()[ch]);
                        for i in base..base + plane {
                            out[i] = g * is / m
                                * (m * grad.data()[i]
                                    - sum_dy[ch]
                                    - xhat.data()[i] * sum_dy_xhat[ch]);
                        }
                    }
                }
            }
            BnMode::Running { .. } => {
                for s_idx in 0..n {
                    for ch in 0..c {
                        let base = (s_idx * c + ch) * plane;
                        let k = scale.data()[ch] * inv_std.data()[ch];
                        for i in base..base + plane {
                            out[i] = k * grad.data()[i];
                        }
                    }
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out).unwrap()
    });
    let dscale = want(1).then(|| Tensor::vector(&sum_dy_xhat));
    let dshift = want(2).then(|| Tensor::vector(&sum_dy));
    vec![dx, dscale, dshift]
}

fn lstm_backward(
    inputs: &[&Tensor],
    cache: &[Tensor],
    grad: &Tensor,
    needs: &[bool],
    hh: usize,
) -> Vec<Option<Tensor>> {
    let (x, h, c, wx, wh) = (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4]);
    let n = x.shape()[0];
    let in_dim = x.shape()[1];
    let gates = cache[0].data();
    let tanh_c = cache[1].data();
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);

    // Pre-activation gate gradients and the carry gradient, rowwise.
    let row_grads = |r: usize, dg_row: &mut [f64], dcp: &mut [f64]| {
        let g_row = &gates[r * 4 * hh..(r + 1) * 4 * hh];
        let tc = &tanh_c[r * hh..(r + 1) * hh];
        let c_prev = &c.data()[r * hh..(r + 1) * hh];
        let dh_out = &grad.data()[r * 2 * hh..r * 2 * hh + hh];
        let dc_out = &grad.data()[r * 2 * hh + hh..(r + 1) * 2 * hh];
        for j in 0..hh {
            let (i_g, f_g, cand, o_g) = (g_row[j], g_row[hh + j], g_row[2 * hh + j], g_row[3 * hh + j]);
            let dc_total = dc_out[j] + dh_out[j] * o_g * (1.0 - tc[j] * tc[j]);
            let d_o = dh_out[j] * tc[j];
            let d_i = dc_total * cand;
            let d_f = dc_total * c_prev[j];
            let d_cand = dc_total * i_g;
            dg_row[j] = d_i * i_g * (1.0 - i_g);
            dg_row[hh + j] = d_f * f_g * (1.0 - f_g);
            dg_row[2 * hh + j] = d_cand * (1.0 - cand * cand);
            dg_row[3 * hh + j] = d_o * o_g * (1.0 - o_g);
            dcp[j] = dc_total * f_g;
        }
    };
    let mut d_gates = vec![0.0; n * 4 * hh];
    let mut dc_prev = vec![0.0; n * hh];
    if n * hh >= 1 << 15 {
        d_gates
            .par_chunks_mut(4 * hh)
            .zip(dc_prev.par_chunks_mut(hh))
            .enumerate()
            .for_each(|(r, (dg_row, dcp))| row_grads(r, dg_row, dcp));
    } else {
        for (r, (dg_row, dcp)) in d_gates.chunks_mut(4 * hh).zip(dc_prev.chunks_mut(hh)).enumerate() {
            row_grads(r, dg_row, dcp);
        }
    }

    let dx = want(0).then(|| {
        Tensor::new(vec![n, in_dim], kernels::matmul_nt(&d_gates, wx.data(), n, 4 * hh, in_dim))
            .unwrap()
    });
    let dh = want(1).then(|| {
        Tensor::new(vec![n, hh], kernels::matmul_nt(&d_gates, wh.data(), n, 4 * hh, hh)).unwrap()
    });
    let dc = want(2).then(|| Tensor::new(vec![n, hh], dc_prev.clone()).unwrap());
    let dwx = want(3).then(|| {
        Tensor::new(vec![in_dim, 4 * hh], kernels::matmul_tn(x.data(), &d_gates, n, in_dim, 4 * hh))
            .unwrap()
    });
    let dwh = want(4).then(|| {
        Tensor::new(vec![hh, 4 * hh], kernels::matmul_tn(h.data(), &d_gates, n, hh, 4 * hh))
            .unwrap()
    });
    let db = want(5).then(|| {
        let mut acc = vec![0.0; 4 * hh];
        for row in d_gates.chunks(4 * hh) {
            for (a, &g) in acc.iter_mut().zip(row) {
                *a += g;
            }
        }
        Tensor::vector(&acc)
    });
    vec![dx, dh, dc, dwx, dwh, db]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_shape_algebra() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[128, 784]));
        let b = g.constant(Tensor::zeros(&[784, 20]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[128, 20]);
    }

    #[test]
    fn matmul_shape_mismatch_is_descriptive() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[4, 10]));
        let labels = g.constant(Tensor::from_fn(&[4, 10], |i| if i % 10 == 3 { 1.0 } else { 0.0 }));
        let loss = g.softmax_cross_entropy(logits, labels).unwrap();
        assert!((g.value(loss).item() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn backward_square() {
        // y = x * x at x = 3 -> dy/dx = 6
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn stop_gradient_forward_identity_backward_zero() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[-1.0, 0.5, 2.0]), true);
        let s = g.stop_gradient(x).unwrap();
        assert_eq!(g.value(s).data(), g.value(x).data());
        let total = g.sum(s).unwrap();
        let grads = g.backward(total).unwrap();
        // Leaf behind stop-gradient: all zeros.
        assert!(grads.get(x).is_none());
        let z = g.grad_or_zeros(&grads, x);
        assert_eq!(z.data(), &[0.0, 0.0, 0.0]);
        // The stop node itself still collects its gradient.
        assert_eq!(grads.get(s).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn stop_gradient_cuts_one_product_branch() {
        // grad of (stop(x) * x) at x = 3 is 3, not 6.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let s = g.stop_gradient(x).unwrap();
        let y = g.mul(s, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 3.0);
    }

    #[test]
    fn stop_gradient_zeroes_entire_chain_behind_it() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[0.3, -0.4]), true);
        let y = g.tanh(x).unwrap();
        let s = g.stop_gradient(y).unwrap();
        let z = g.abs(s).unwrap();
        let loss = g.sum(z).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert!(grads.get(y).is_none());
    }

    #[test]
    fn backward_is_deterministic() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 2], &[0.3, -1.4, 0.9, 2.0]), true);
        let w = g.leaf(t(&[2, 2], &[0.5, 0.25, -0.75, 1.5]), true);
        let y = g.matmul(x, w).unwrap();
        let z = g.tanh(y).unwrap();
        let loss = g.sum(z).unwrap();
        let g1 = g.backward(loss).unwrap();
        let g2 = g.backward(loss).unwrap();
        for id in [x, w] {
            assert!(g1.get(id).unwrap().bit_eq(g2.get(id).unwrap()));
        }
    }

    #[test]
    fn batchnorm_inference_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 2, 2], |i| (i as f64) * 0.13 - 1.0));
        let scale = g.constant(Tensor::full(&[3], 1.0));
        let shift = g.constant(Tensor::zeros(&[3]));
        let mode = BnMode::Running {
            mean: Tensor::zeros(&[3]),
            var: Tensor::full(&[3], 1.0),
        };
        // eps shifts the variance, so identity needs var = 1 - eps.
        let eps = 1e-5;
        let mode_exact = match mode {
            BnMode::Running { mean, .. } => BnMode::Running {
                mean,
                var: Tensor::full(&[3], 1.0 - eps),
            },
            m => m,
        };
        let y = g.batch_norm(x, scale, shift, eps, mode_exact).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(x)) < 1e-12);
    }

    #[test]
    fn sign_of_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-2.5, 0.0, 0.1]));
        let y = g.sign(x).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_and_slices_roundtrip() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 5.0, 6.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 7.0]));
        let cat = g.concat_last(a, b).unwrap();
        assert_eq!(g.value(cat).data(), &[1.0, 2.0, 3.0, 5.0, 6.0, 7.0]);
        let left = g.slice_cols(cat, 0, 2).unwrap();
        assert_eq!(g.value(left).data(), &[1.0, 2.0, 5.0, 6.0]);
        let rows = g.slice_rows(cat, 1, 1).unwrap();
        assert_eq!(g.value(rows).data(), &[5.0, 6.0, 7.0]);
    }

    #[test]
    fn lstm_cell_zero_weights_zero_state() {
        // All-zero weights and state: candidate tanh(0)=0 is gated by
        // sigmoid(0)=0.5, so c' = 0 and h' = 0 for any input.
        let mut g = Graph::new();
        let hh = 4;
        let x = g.constant(t(&[1, 2], &[0.7, -1.3]));
        let h = g.constant(Tensor::zeros(&[1, hh]));
        let c = g.constant(Tensor::zeros(&[1, hh]));
        let wx = g.constant(Tensor::zeros(&[2, 4 * hh]));
        let wh = g.constant(Tensor::zeros(&[hh, 4 * hh]));
        let b = g.constant(Tensor::zeros(&[4 * hh]));
        let out = g.lstm_cell(x, h, c, wx, wh, b, hh).unwrap();
        assert_eq!(g.value(out).data(), &vec![0.0; 2 * hh][..]);
    }
}
