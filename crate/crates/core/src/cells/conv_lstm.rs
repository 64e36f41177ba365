//! Convolutional LSTM cell: the four standard gates computed by convolving
//! the concatenated `[x, h]`, with a persistent cell state.

use rand::Rng;

use super::{BoundStep, Cell, CellKind};
use crate::tape::{Graph, NodeId, Result};
use crate::tensor::{Kernel, Tensor};

/// Gate kernels are `ExEx(2C)xC`, acting on `[x, h]` concatenated along
/// channels; biases are per-channel.
#[derive(Clone, Debug)]
pub struct ConvLstmParams {
    pub w_i: Kernel,
    pub w_f: Kernel,
    pub w_o: Kernel,
    pub w_g: Kernel,
    pub b_i: Tensor,
    pub b_f: Tensor,
    pub b_o: Tensor,
    pub b_g: Tensor,
}

/// Test-only gate forcing mirroring the gate-identity cases.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ConvLstmGateOverride {
    /// `f = 1`, `i = 0`: the cell state is carried through unchanged.
    ForgetOneInputZero,
    /// `o = 0`: the hidden state is forced to zero.
    OutputZero,
}

#[derive(Clone, Debug)]
pub struct ConvLstm {
    pub params: ConvLstmParams,
    gate_override: Option<ConvLstmGateOverride>,
}

impl ConvLstm {
    pub fn new(params: ConvLstmParams) -> ConvLstm {
        ConvLstm { params, gate_override: None }
    }

    pub fn init<R: Rng>(channels: usize, kernel_extent: usize, rng: &mut R) -> ConvLstm {
        let c = channels;
        let e = kernel_extent;
        let std = 1.0 / ((e * e * 2 * c) as f64).sqrt();
        let k = |rng: &mut R| Kernel::randn([e, e, 2 * c, c], std, rng).expect("odd extent");
        ConvLstm::new(ConvLstmParams {
            w_i: k(rng),
            w_f: k(rng),
            w_o: k(rng),
            w_g: k(rng),
            b_i: Tensor::zeros([1, 1, 1, c]),
            // Forget gate starts open, the usual LSTM initialization.
            b_f: Tensor::ones([1, 1, 1, c]),
            b_o: Tensor::zeros([1, 1, 1, c]),
            b_g: Tensor::zeros([1, 1, 1, c]),
        })
    }

    /// Test hook: force gates to constants.
    pub fn with_gate_override(mut self, ov: ConvLstmGateOverride) -> ConvLstm {
        self.gate_override = Some(ov);
        self
    }

    pub fn kernel_extent(&self) -> usize {
        self.params.w_i.kh()
    }
}

struct BoundConvLstm {
    w_i: NodeId,
    w_f: NodeId,
    w_o: NodeId,
    w_g: NodeId,
    b_i: NodeId,
    b_f: NodeId,
    b_o: NodeId,
    b_g: NodeId,
    gate_override: Option<ConvLstmGateOverride>,
    params: Vec<(String, NodeId)>,
}

impl Cell for ConvLstm {
    fn kind(&self) -> CellKind {
        CellKind::ConvLstm
    }

    fn channels(&self) -> usize {
        self.params.w_i.out_channels()
    }

    fn state_arity(&self) -> usize {
        2
    }

    fn bind(&self, g: &mut Graph) -> Result<Box<dyn BoundStep>> {
        let p = &self.params;
        let w_i = g.kernel_leaf(&p.w_i)?;
        let w_f = g.kernel_leaf(&p.w_f)?;
        let w_o = g.kernel_leaf(&p.w_o)?;
        let w_g = g.kernel_leaf(&p.w_g)?;
        let b_i = g.leaf(p.b_i.clone())?;
        let b_f = g.leaf(p.b_f.clone())?;
        let b_o = g.leaf(p.b_o.clone())?;
        let b_g = g.leaf(p.b_g.clone())?;
        let params = vec![
            ("cell.w_i".to_string(), w_i),
            ("cell.w_f".to_string(), w_f),
            ("cell.w_o".to_string(), w_o),
            ("cell.w_g".to_string(), w_g),
            ("cell.b_i".to_string(), b_i),
            ("cell.b_f".to_string(), b_f),
            ("cell.b_o".to_string(), b_o),
            ("cell.b_g".to_string(), b_g),
        ];
        Ok(Box::new(BoundConvLstm {
            w_i,
            w_f,
            w_o,
            w_g,
            b_i,
            b_f,
            b_o,
            b_g,
            gate_override: self.gate_override,
            params,
        }))
    }

    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        let p = &self.params;
        f("cell.w_i", p.w_i.as_tensor());
        f("cell.w_f", p.w_f.as_tensor());
        f("cell.w_o", p.w_o.as_tensor());
        f("cell.w_g", p.w_g.as_tensor());
        f("cell.b_i", &p.b_i);
        f("cell.b_f", &p.b_f);
        f("cell.b_o", &p.b_o);
        f("cell.b_g", &p.b_g);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let p = &mut self.params;
        for (name, k) in [
            ("cell.w_i", &mut p.w_i),
            ("cell.w_f", &mut p.w_f),
            ("cell.w_o", &mut p.w_o),
            ("cell.w_g", &mut p.w_g),
        ] {
            let mut t = k.as_tensor().clone();
            f(name, &mut t);
            *k = Kernel::new(t).expect("kernel extent unchanged");
        }
        f("cell.b_i", &mut p.b_i);
        f("cell.b_f", &mut p.b_f);
        f("cell.b_o", &mut p.b_o);
        f("cell.b_g", &mut p.b_g);
    }
}

impl BoundConvLstm {
    fn gate(
        &self,
        g: &mut Graph,
        cat: NodeId,
        w: NodeId,
        b: NodeId,
        squash: fn(&mut Graph, NodeId) -> Result<NodeId>,
    ) -> Result<NodeId> {
        let conv = g.conv2d(cat, w)?;
        let dims = g.shape_of(conv).0;
        let bias = g.broadcast_channels(b, dims)?;
        let pre = g.add(conv, bias)?;
        squash(g, pre)
    }
}

impl BoundStep for BoundConvLstm {
    fn step(&self, g: &mut Graph, x: NodeId, state: &[NodeId]) -> Result<Vec<NodeId>> {
        let (h, c) = (state[0], state[1]);
        super::check_channels(
            g.shape_of(x).channels(),
            g.shape_of(h).channels(),
            "conv_lstm_step drive vs state",
        )?;
        let dims = g.shape_of(h).0;
        let cat = g.concat_channels(x, h)?;

        let (i, f, o) = match self.gate_override {
            None => (
                self.gate(g, cat, self.w_i, self.b_i, Graph::sigmoid)?,
                self.gate(g, cat, self.w_f, self.b_f, Graph::sigmoid)?,
                self.gate(g, cat, self.w_o, self.b_o, Graph::sigmoid)?,
            ),
            Some(ConvLstmGateOverride::ForgetOneInputZero) => (
                g.leaf(Tensor::zeros(dims))?,
                g.leaf(Tensor::ones(dims))?,
                self.gate(g, cat, self.w_o, self.b_o, Graph::sigmoid)?,
            ),
            Some(ConvLstmGateOverride::OutputZero) => (
                self.gate(g, cat, self.w_i, self.b_i, Graph::sigmoid)?,
                self.gate(g, cat, self.w_f, self.b_f, Graph::sigmoid)?,
                g.leaf(Tensor::zeros(dims))?,
            ),
        };
        let cand = self.gate(g, cat, self.w_g, self.b_g, Graph::tanh)?;

        let kept = g.mul(f, c)?;
        let written = g.mul(i, cand)?;
        let c_new = g.add(kept, written)?;
        let c_act = g.tanh(c_new)?;
        let h_new = g.mul(o, c_act)?;
        Ok(vec![h_new, c_new])
    }

    fn params(&self) -> &[(String, NodeId)] {
        &self.params
    }
}
