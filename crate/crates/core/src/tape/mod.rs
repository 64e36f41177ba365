//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records every operation applied to its nodes together with the
//! forward value of each node. Backward passes come in two flavors:
//!
//! * [`Graph::vjp`] / [`Graph::grad`] compute plain tensors and record
//!   nothing;
//! * [`Graph::vjp_tracked`] expresses the adjoint computation as new graph
//!   nodes, so the resulting vector-Jacobian product can be differentiated
//!   again (the double-backward path the Lipschitz penalty needs).
//!
//! A graph is confined to one thread. Saved forward values are metered so
//! that memory growth of the different training algorithms can be measured
//! rather than asserted; see [`Meter`].

mod backward;
pub mod kernels;

use std::cell::Cell;
use std::rc::Rc;

use crate::tensor::{Kernel, Shape, Tensor, TensorError};

pub type Result<T> = std::result::Result<T, TapeError>;

/// Handle to a recorded node. Only meaningful for the graph that issued it.
pub type NodeId = usize;

#[derive(Debug, thiserror::Error)]
pub enum TapeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("node {node} is out of range for this graph ({len} nodes)")]
    UnknownNode { node: NodeId, len: usize },
    #[error("wrt node {node} is not an ancestor of the differentiated output")]
    NotAnAncestor { node: NodeId },
    #[error("cotangent shape {got} does not match output shape {expected}")]
    CotangentShape { expected: Shape, got: Shape },
    #[error("gradient target must be scalar, got shape {shape}")]
    NotScalar { shape: Shape },
    #[error("{op} does not support a differentiable backward pass")]
    UnsupportedDoubleBackward { op: &'static str },
}

/// Elementwise nonlinearities available as a single tape op.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PointwiseFn {
    Softplus,
    Sigmoid,
    Tanh,
    Relu,
}

impl PointwiseFn {
    pub fn name(self) -> &'static str {
        match self {
            PointwiseFn::Softplus => "softplus",
            PointwiseFn::Sigmoid => "sigmoid",
            PointwiseFn::Tanh => "tanh",
            PointwiseFn::Relu => "relu",
        }
    }

    #[inline]
    pub fn eval(self, v: f64) -> f64 {
        match self {
            PointwiseFn::Softplus => kernels::softplus(v),
            PointwiseFn::Sigmoid => kernels::sigmoid(v),
            PointwiseFn::Tanh => v.tanh(),
            PointwiseFn::Relu => v.max(0.0),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// `scale * x + shift`; only `scale` matters to the backward pass.
    Affine { x: NodeId, scale: f64 },
    Sqrt(NodeId),
    Pointwise { x: NodeId, f: PointwiseFn },
    Conv2d { x: NodeId, k: NodeId },
    FlipTranspose(NodeId),
    /// Kernel-side adjoint of a convolution, bilinear in `(x, upstream)`.
    KernelGrad { x: NodeId, upstream: NodeId },
    ChannelSum(NodeId),
    BroadcastC { v: NodeId },
    SumAll(NodeId),
    BroadcastAll { s: NodeId },
    ConcatC(NodeId, NodeId),
    SliceC { x: NodeId, from: usize, to: usize },
    L2Norm(NodeId),
    Detach(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Affine { .. } => "affine",
            Op::Sqrt(..) => "sqrt",
            Op::Pointwise { f, .. } => f.name(),
            Op::Conv2d { .. } => "conv2d",
            Op::FlipTranspose(..) => "flip_transpose",
            Op::KernelGrad { .. } => "kernel_grad",
            Op::ChannelSum(..) => "channel_sum",
            Op::BroadcastC { .. } => "broadcast_channels",
            Op::SumAll(..) => "sum_all",
            Op::BroadcastAll { .. } => "broadcast_all",
            Op::ConcatC(..) => "concat_channels",
            Op::SliceC { .. } => "slice_channels",
            Op::L2Norm(..) => "l2_norm",
            Op::Detach(..) => "detach",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::ConcatC(a, b) => {
                vec![a, b]
            }
            Op::Affine { x, .. }
            | Op::Sqrt(x)
            | Op::Pointwise { x, .. }
            | Op::FlipTranspose(x)
            | Op::ChannelSum(x)
            | Op::BroadcastC { v: x }
            | Op::SumAll(x)
            | Op::BroadcastAll { s: x }
            | Op::SliceC { x, .. }
            | Op::L2Norm(x)
            | Op::Detach(x) => vec![x],
            Op::Conv2d { x, k } => vec![x, k],
            Op::KernelGrad { x, upstream, .. } => vec![x, upstream],
        }
    }
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Tensor,
}

/// Shared counter of saved-activation bytes, with a high-water mark.
///
/// Several graphs (for example the per-step scratch graphs of an untracked
/// unroll plus the main tape) can report into one meter, so the peak reflects
/// everything alive at once.
#[derive(Debug, Default)]
pub struct Meter {
    current_bytes: Cell<usize>,
    peak_bytes: Cell<usize>,
    current_nodes: Cell<usize>,
    peak_nodes: Cell<usize>,
}

impl Meter {
    pub fn new() -> Rc<Meter> {
        Rc::new(Meter::default())
    }

    fn add(&self, bytes: usize) {
        self.current_bytes.set(self.current_bytes.get() + bytes);
        self.current_nodes.set(self.current_nodes.get() + 1);
        if self.current_bytes.get() > self.peak_bytes.get() {
            self.peak_bytes.set(self.current_bytes.get());
        }
        if self.current_nodes.get() > self.peak_nodes.get() {
            self.peak_nodes.set(self.current_nodes.get());
        }
    }

    fn release(&self, bytes: usize, nodes: usize) {
        self.current_bytes.set(self.current_bytes.get().saturating_sub(bytes));
        self.current_nodes.set(self.current_nodes.get().saturating_sub(nodes));
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes.get()
    }

    pub fn peak_nodes(&self) -> usize {
        self.peak_nodes.get()
    }

    pub fn current_bytes(&self) -> usize {
        self.current_bytes.get()
    }
}

/// Recorded operation graph. Node ids are assigned in topological order.
pub struct Graph {
    nodes: Vec<Node>,
    meter: Rc<Meter>,
    owned_bytes: usize,
}

impl Drop for Graph {
    fn drop(&mut self) {
        self.meter.release(self.owned_bytes, self.nodes.len());
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph::with_meter(Meter::new())
    }

    /// Graph whose saved activations are counted into `meter`.
    pub fn with_meter(meter: Rc<Meter>) -> Graph {
        Graph {
            nodes: Vec::new(),
            meter,
            owned_bytes: 0,
        }
    }

    pub fn meter(&self) -> Rc<Meter> {
        Rc::clone(&self.meter)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn shape_of(&self, id: NodeId) -> Shape {
        self.nodes[id].value.shape()
    }

    fn check_node(&self, id: NodeId) -> Result<()> {
        if id >= self.nodes.len() {
            return Err(TapeError::UnknownNode {
                node: id,
                len: self.nodes.len(),
            });
        }
        Ok(())
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        if !value.is_all_finite() {
            return Err(TensorError::NonFinite { op: op.name().into() }.into());
        }
        let bytes = value.byte_len();
        self.meter.add(bytes);
        self.owned_bytes += bytes;
        self.nodes.push(Node { op, value });
        Ok(self.nodes.len() - 1)
    }

    /// Insert a tensor as a leaf. Leaves are both constants and parameters;
    /// what distinguishes a parameter is only that a gradient is requested
    /// for its node.
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf, value)
    }

    pub fn kernel_leaf(&mut self, k: &Kernel) -> Result<NodeId> {
        self.push(Op::Leaf, k.as_tensor().clone())
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &str) -> Result<()> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: op.into(),
                lhs: sa,
                rhs: sb,
            }
            .into());
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_node(a)?;
        self.check_node(b)?;
        self.same_shape(a, b, "add")?;
        let value = self.nodes[a].value.add(&self.nodes[b].value)?;
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_node(a)?;
        self.check_node(b)?;
        self.same_shape(a, b, "sub")?;
        let value = self.nodes[a].value.sub(&self.nodes[b].value)?;
        self.push(Op::Sub(a, b), value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_node(a)?;
        self.check_node(b)?;
        self.same_shape(a, b, "mul")?;
        let value = self.nodes[a].value.hadamard(&self.nodes[b].value)?;
        self.push(Op::Mul(a, b), value)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_node(a)?;
        self.check_node(b)?;
        self.same_shape(a, b, "div")?;
        let value = {
            let (da, db) = (self.nodes[a].value.data(), self.nodes[b].value.data());
            let out: Vec<f64> = da.iter().zip(db.iter()).map(|(x, y)| x / y).collect();
            Tensor::new(self.nodes[a].value.dims(), out)?
        };
        self.push(Op::Div(a, b), value)
    }

    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        self.check_node(x)?;
        let value = self.nodes[x].value.map(|v| scale * v + shift);
        self.push(Op::Affine { x, scale }, value)
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.affine(x, -1.0, 0.0)
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_node(x)?;
        let value = self.nodes[x].value.map(f64::sqrt);
        self.push(Op::Sqrt(x), value)
    }

    pub fn pointwise(&mut self, x: NodeId, f: PointwiseFn) -> Result<NodeId> {
        self.check_node(x)?;
        let value = self.nodes[x].value.map(|v| f.eval(v));
        self.push(Op::Pointwise { x, f }, value)
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.pointwise(x, PointwiseFn::Softplus)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.pointwise(x, PointwiseFn::Sigmoid)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.pointwise(x, PointwiseFn::Tanh)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.pointwise(x, PointwiseFn::Relu)
    }

    /// "Same"-padded convolution; `x` is `(B,H,W,Cin)`, `k` is
    /// `(kh,kw,Cin,Cout)` with odd spatial extent. Differentiable with
    /// respect to both arguments.
    pub fn conv2d(&mut self, x: NodeId, k: NodeId) -> Result<NodeId> {
        self.check_node(x)?;
        self.check_node(k)?;
        let (xs, ks) = (self.shape_of(x), self.shape_of(k));
        if xs.channels() != ks.0[2] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d: input channels vs kernel in_channels".into(),
                lhs: xs,
                rhs: ks,
            }
            .into());
        }
        if ks.0[0] % 2 == 0 || ks.0[1] % 2 == 0 {
            return Err(TensorError::InvalidShape {
                shape: ks,
                reason: "conv2d kernel spatial extent must be odd".into(),
            }
            .into());
        }
        let value = kernels::conv2d(&self.nodes[x].value, &self.nodes[k].value);
        self.push(Op::Conv2d { x, k }, value)
    }

    pub fn flip_transpose(&mut self, k: NodeId) -> Result<NodeId> {
        self.check_node(k)?;
        let value = kernels::flip_transpose(&self.nodes[k].value);
        self.push(Op::FlipTranspose(k), value)
    }

    pub(crate) fn kernel_grad(&mut self, x: NodeId, upstream: NodeId, kh: usize, kw: usize) -> Result<NodeId> {
        self.check_node(x)?;
        self.check_node(upstream)?;
        let value = kernels::kernel_grad(&self.nodes[x].value, &self.nodes[upstream].value, kh, kw);
        self.push(Op::KernelGrad { x, upstream }, value)
    }

    pub fn channel_sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_node(x)?;
        let value = kernels::channel_sum(&self.nodes[x].value);
        self.push(Op::ChannelSum(x), value)
    }

    /// Tile a `(1,1,1,C)` vector over the batch/spatial extent of `like`.
    pub fn broadcast_channels(&mut self, v: NodeId, like: [usize; 4]) -> Result<NodeId> {
        self.check_node(v)?;
        let vs = self.shape_of(v);
        if vs.0[0] != 1 || vs.0[1] != 1 || vs.0[2] != 1 || vs.channels() != like[3] {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_channels".into(),
                lhs: vs,
                rhs: Shape(like),
            }
            .into());
        }
        let value = kernels::broadcast_channels(&self.nodes[v].value, like);
        self.push(Op::BroadcastC { v }, value)
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_node(x)?;
        let value = kernels::sum_all(&self.nodes[x].value);
        self.push(Op::SumAll(x), value)
    }

    pub fn broadcast_all(&mut self, s: NodeId, like: [usize; 4]) -> Result<NodeId> {
        self.check_node(s)?;
        let ss = self.shape_of(s);
        if !ss.is_scalar() {
            return Err(TapeError::NotScalar { shape: ss });
        }
        let value = kernels::broadcast_all(self.nodes[s].value.data()[0], like);
        self.push(Op::BroadcastAll { s }, value)
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.shape_of(x).len() as f64;
        let s = self.sum_all(x)?;
        self.affine(s, 1.0 / n, 0.0)
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_node(a)?;
        self.check_node(b)?;
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa.0[..3] != sb.0[..3] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels".into(),
                lhs: sa,
                rhs: sb,
            }
            .into());
        }
        let value = kernels::concat_channels(&self.nodes[a].value, &self.nodes[b].value);
        self.push(Op::ConcatC(a, b), value)
    }

    pub fn slice_channels(&mut self, x: NodeId, from: usize, to: usize) -> Result<NodeId> {
        self.check_node(x)?;
        let s = self.shape_of(x);
        if from >= to || to > s.channels() {
            return Err(TensorError::InvalidShape {
                shape: s,
                reason: format!("channel slice {from}..{to} out of range"),
            }
            .into());
        }
        let value = kernels::slice_channels(&self.nodes[x].value, from, to);
        self.push(Op::SliceC { x, from, to }, value)
    }

    /// Euclidean norm as a scalar node. Its gradient is defined as zero at
    /// the origin, which keeps an inactive rectified penalty at exactly zero
    /// gradient.
    pub fn l2_norm(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_node(x)?;
        let value = Tensor::scalar(self.nodes[x].value.l2_norm());
        self.push(Op::L2Norm(x), value)
    }

    /// Identity forward, gradient barrier backward.
    pub fn detach(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_node(x)?;
        let value = self.nodes[x].value.clone();
        self.push(Op::Detach(x), value)
    }

    /// Per-channel batch normalization with on-line statistics over the
    /// batch and spatial dimensions, then a learned affine transform:
    /// `bias + scale * (x - mean) / sqrt(var + eps)`.
    ///
    /// `scale` and `bias` are `(1,1,1,C)` nodes. Statistics are recomputed
    /// on every call; there are no running averages.
    pub fn batch_norm(&mut self, x: NodeId, scale: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let xs = self.shape_of(x);
        let c = xs.channels();
        for (name, v) in [("scale", scale), ("bias", bias)] {
            let vs = self.shape_of(v);
            if vs.0 != [1, 1, 1, c] {
                return Err(TensorError::ShapeMismatch {
                    op: format!("batch_norm {name}"),
                    lhs: vs,
                    rhs: Shape([1, 1, 1, c]),
                }
                .into());
            }
        }
        if eps <= 0.0 {
            return Err(TensorError::InvalidShape {
                shape: xs,
                reason: "batch_norm eps must be > 0".into(),
            }
            .into());
        }
        let pool = xs.spatial_batch() as f64;
        let sum = self.channel_sum(x)?;
        let mean = self.affine(sum, 1.0 / pool, 0.0)?;
        let mean_b = self.broadcast_channels(mean, xs.0)?;
        let centered = self.sub(x, mean_b)?;
        let sq = self.mul(centered, centered)?;
        let var_sum = self.channel_sum(sq)?;
        let var = self.affine(var_sum, 1.0 / pool, 0.0)?;
        let var_eps = self.affine(var, 1.0, eps)?;
        let std = self.sqrt(var_eps)?;
        let std_b = self.broadcast_channels(std, xs.0)?;
        let normed = self.div(centered, std_b)?;
        let scale_b = self.broadcast_channels(scale, xs.0)?;
        let bias_b = self.broadcast_channels(bias, xs.0)?;
        let scaled = self.mul(normed, scale_b)?;
        self.add(scaled, bias_b)
    }

    /// Mean per-pixel binary cross-entropy from logits, computed in the
    /// overflow-safe form `softplus(logit) - target * logit`.
    pub fn bce_with_logits_mean(&mut self, logits: NodeId, target: NodeId) -> Result<NodeId> {
        self.same_shape(logits, target, "bce_with_logits")?;
        let sp = self.softplus(logits)?;
        let ty = self.mul(target, logits)?;
        let diff = self.sub(sp, ty)?;
        self.mean_all(diff)
    }
}
