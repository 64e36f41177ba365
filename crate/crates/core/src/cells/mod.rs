//! Recurrent convolutional transition cells and the model's input/readout
//! stages.
//!
//! A cell is a pure function `state_{t+1} = F(x, state_t, params)` expressed
//! in tape ops. Parameters are shared across steps; binding a cell into a
//! graph inserts its parameters as leaves once, after which `step` can be
//! applied any number of times.

pub mod checkpoint;
mod conv_lstm;
mod hgru;
mod linear;

pub use conv_lstm::{ConvLstm, ConvLstmGateOverride, ConvLstmParams};
pub use hgru::{GateOverride, HGru, HGruParams};
pub use linear::{DenseLinearCell, IdentityCell};

use rand::Rng;

use crate::tape::{Graph, NodeId, Result};
use crate::tensor::{Kernel, Tensor, TensorError};

/// Per-channel batch-norm parameters, each `(1,1,1,C)`.
#[derive(Clone, Debug)]
pub struct BnParams {
    pub scale: Tensor,
    pub bias: Tensor,
}

impl BnParams {
    pub fn identity(channels: usize) -> BnParams {
        BnParams {
            scale: Tensor::ones([1, 1, 1, channels]),
            bias: Tensor::zeros([1, 1, 1, channels]),
        }
    }
}

/// Default epsilon guarding the batch-norm divide; configurable everywhere
/// it appears.
pub const DEFAULT_BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CellKind {
    HGru,
    ConvLstm,
    Linear,
    Identity,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::HGru => "hgru",
            CellKind::ConvLstm => "convlstm",
            CellKind::Linear => "linear",
            CellKind::Identity => "identity",
        }
    }
}

/// A cell bound into one graph: parameter leaves are recorded, `step` can be
/// applied repeatedly with shared parameters.
pub trait BoundStep {
    /// One transition. `state` and the returned vector have the cell's
    /// state arity; part 0 is the hidden state h.
    fn step(&self, g: &mut Graph, x: NodeId, state: &[NodeId]) -> Result<Vec<NodeId>>;
    /// Bound parameter leaves in declaration order.
    fn params(&self) -> &[(String, NodeId)];
}

/// A recurrent transition function with named parameters.
pub trait Cell {
    fn kind(&self) -> CellKind;
    fn channels(&self) -> usize;
    /// Number of state tensors (1 for hGRU, 2 for convLSTM's `(h, c)`).
    fn state_arity(&self) -> usize {
        1
    }
    fn bind(&self, g: &mut Graph) -> Result<Box<dyn BoundStep>>;
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    /// All-zero initial state matching a drive of the given shape.
    fn zero_state(&self, drive_dims: [usize; 4]) -> Vec<Tensor> {
        let dims = [drive_dims[0], drive_dims[1], drive_dims[2], self.channels()];
        (0..self.state_arity()).map(|_| Tensor::zeros(dims)).collect()
    }
}

/// Evaluate one step on a scratch graph, returning plain state tensors.
/// Used by untracked unrolls; the scratch graph shares the caller's meter so
/// its transient activations are accounted for.
pub fn step_values(
    cell: &dyn Cell,
    x: &Tensor,
    state: &[Tensor],
    meter: Option<std::rc::Rc<crate::tape::Meter>>,
) -> Result<Vec<Tensor>> {
    let mut g = match meter {
        Some(m) => Graph::with_meter(m),
        None => Graph::new(),
    };
    let xn = g.leaf(x.clone())?;
    let sn: Vec<NodeId> = state
        .iter()
        .map(|t| g.leaf(t.clone()))
        .collect::<Result<_>>()?;
    let bound = cell.bind(&mut g)?;
    let out = bound.step(&mut g, xn, &sn)?;
    Ok(out.into_iter().map(|id| g.value(id).clone()).collect())
}

fn check_channels(expected: usize, got: usize, what: &str) -> Result<()> {
    if expected != got {
        return Err(TensorError::ShapeMismatch {
            op: format!("{what}: expected {expected} channels"),
            lhs: crate::tensor::Shape([1, 1, 1, got]),
            rhs: crate::tensor::Shape([1, 1, 1, expected]),
        }
        .into());
    }
    Ok(())
}

/// Trainable input stage: a bank of convolution filters lifting a grayscale
/// image to the cell's channel count, optionally followed by batch norm.
#[derive(Clone, Debug)]
pub struct InputStage {
    pub bank: Kernel,
    pub bn: Option<BnParams>,
    pub eps: f64,
}

impl InputStage {
    pub fn init<R: Rng>(kernel_extent: usize, channels: usize, rng: &mut R) -> InputStage {
        let std = 1.0 / ((kernel_extent * kernel_extent) as f64).sqrt();
        InputStage {
            bank: Kernel::randn([kernel_extent, kernel_extent, 1, channels], std, rng)
                .expect("odd extent"),
            bn: Some(BnParams::identity(channels)),
            eps: DEFAULT_BN_EPS,
        }
    }

    /// Bank-only variant; convolution with a Dirac bank is then the exact
    /// identity on the image.
    pub fn without_bn(bank: Kernel) -> InputStage {
        InputStage { bank, bn: None, eps: DEFAULT_BN_EPS }
    }

    /// Record the stage on `g`, returning the drive node and the bound
    /// parameter leaves.
    pub fn build(&self, g: &mut Graph, image: NodeId) -> Result<(NodeId, Vec<(String, NodeId)>)> {
        check_channels(1, g.shape_of(image).channels(), "input_stage image")?;
        let mut params = Vec::new();
        let bank = g.kernel_leaf(&self.bank)?;
        params.push(("input.bank".to_string(), bank));
        let mut z = g.conv2d(image, bank)?;
        if let Some(bn) = &self.bn {
            let scale = g.leaf(bn.scale.clone())?;
            let bias = g.leaf(bn.bias.clone())?;
            params.push(("input.bn_scale".to_string(), scale));
            params.push(("input.bn_bias".to_string(), bias));
            z = g.batch_norm(z, scale, bias, self.eps)?;
        }
        Ok((z, params))
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("input.bank", self.bank.as_tensor());
        if let Some(bn) = &self.bn {
            f("input.bn_scale", &bn.scale);
            f("input.bn_bias", &bn.bias);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let mut t = self.bank.as_tensor().clone();
        f("input.bank", &mut t);
        self.bank = Kernel::new(t).expect("kernel extent unchanged");
        if let Some(bn) = &mut self.bn {
            f("input.bn_scale", &mut bn.scale);
            f("input.bn_bias", &mut bn.bias);
        }
    }
}

/// 1x1 readout head: batch norm over the hidden state, then a 1x1
/// convolution down to one logit channel per pixel.
#[derive(Clone, Debug)]
pub struct Readout {
    pub bn: BnParams,
    pub kernel: Kernel,
    pub eps: f64,
}

impl Readout {
    pub fn init<R: Rng>(channels: usize, rng: &mut R) -> Readout {
        Readout {
            bn: BnParams::identity(channels),
            kernel: Kernel::randn([1, 1, channels, 1], 1.0 / (channels as f64).sqrt(), rng)
                .expect("1x1 kernel"),
            eps: DEFAULT_BN_EPS,
        }
    }

    /// Bind the head's parameters once; [`BoundReadout::apply`] can then map
    /// any number of hidden states to logits with shared parameters.
    pub fn bind(&self, g: &mut Graph) -> Result<BoundReadout> {
        let scale = g.leaf(self.bn.scale.clone())?;
        let bias = g.leaf(self.bn.bias.clone())?;
        let kernel = g.kernel_leaf(&self.kernel)?;
        Ok(BoundReadout {
            scale,
            bias,
            kernel,
            eps: self.eps,
            channels: self.kernel.in_channels(),
            params: vec![
                ("readout.bn_scale".to_string(), scale),
                ("readout.bn_bias".to_string(), bias),
                ("readout.kernel".to_string(), kernel),
            ],
        })
    }

    pub fn build(&self, g: &mut Graph, h: NodeId) -> Result<(NodeId, Vec<(String, NodeId)>)> {
        let bound = self.bind(g)?;
        let logits = bound.apply(g, h)?;
        Ok((logits, bound.params))
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("readout.bn_scale", &self.bn.scale);
        f("readout.bn_bias", &self.bn.bias);
        f("readout.kernel", self.kernel.as_tensor());
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("readout.bn_scale", &mut self.bn.scale);
        f("readout.bn_bias", &mut self.bn.bias);
        let mut t = self.kernel.as_tensor().clone();
        f("readout.kernel", &mut t);
        self.kernel = Kernel::new(t).expect("kernel extent unchanged");
    }
}

/// Readout head bound into one graph.
pub struct BoundReadout {
    scale: NodeId,
    bias: NodeId,
    kernel: NodeId,
    eps: f64,
    channels: usize,
    pub params: Vec<(String, NodeId)>,
}

impl BoundReadout {
    pub fn apply(&self, g: &mut Graph, h: NodeId) -> Result<NodeId> {
        check_channels(self.channels, g.shape_of(h).channels(), "readout")?;
        let normed = g.batch_norm(h, self.scale, self.bias, self.eps)?;
        g.conv2d(normed, self.kernel)
    }
}

/// Either production cell, clonable and checkpointable.
#[derive(Clone, Debug)]
pub enum AnyCell {
    HGru(HGru),
    ConvLstm(ConvLstm),
}

impl Cell for AnyCell {
    fn kind(&self) -> CellKind {
        match self {
            AnyCell::HGru(c) => c.kind(),
            AnyCell::ConvLstm(c) => c.kind(),
        }
    }

    fn channels(&self) -> usize {
        match self {
            AnyCell::HGru(c) => c.channels(),
            AnyCell::ConvLstm(c) => c.channels(),
        }
    }

    fn state_arity(&self) -> usize {
        match self {
            AnyCell::HGru(c) => c.state_arity(),
            AnyCell::ConvLstm(c) => c.state_arity(),
        }
    }

    fn bind(&self, g: &mut Graph) -> Result<Box<dyn BoundStep>> {
        match self {
            AnyCell::HGru(c) => c.bind(g),
            AnyCell::ConvLstm(c) => c.bind(g),
        }
    }

    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            AnyCell::HGru(c) => c.visit_params(f),
            AnyCell::ConvLstm(c) => c.visit_params(f),
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            AnyCell::HGru(c) => c.visit_params_mut(f),
            AnyCell::ConvLstm(c) => c.visit_params_mut(f),
        }
    }
}

/// Full trainable model: input stage, recurrent cell, readout head.
#[derive(Clone, Debug)]
pub struct Model {
    pub input: InputStage,
    pub cell: AnyCell,
    pub readout: Readout,
}

impl Model {
    /// Freshly initialized model for the given cell kind and sizes.
    pub fn init<R: Rng>(
        kind: CellKind,
        channels: usize,
        kernel_extent: usize,
        input_extent: usize,
        rng: &mut R,
    ) -> Model {
        let cell = match kind {
            CellKind::HGru => AnyCell::HGru(HGru::init(channels, kernel_extent, rng)),
            CellKind::ConvLstm => AnyCell::ConvLstm(ConvLstm::init(channels, kernel_extent, rng)),
            other => panic!("{} is not a trainable model cell", other.name()),
        };
        Model {
            input: InputStage::init(input_extent, channels, rng),
            cell,
            readout: Readout::init(channels, rng),
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.input.visit_params(f);
        self.cell.visit_params(f);
        self.readout.visit_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.input.visit_params_mut(f);
        self.cell.visit_params_mut(f);
        self.readout.visit_params_mut(f);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.len());
        n
    }
}
