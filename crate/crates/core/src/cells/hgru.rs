//! Horizontal gated recurrent unit: a two-stage convolutional cell with
//! suppressive then facilitative interactions, gated interpolation of the
//! previous hidden state, and softplus rectification in each stage.

use rand::Rng;

use super::{BnParams, BoundStep, Cell, CellKind, DEFAULT_BN_EPS};
use crate::tape::{Graph, NodeId, Result};
use crate::tensor::{Kernel, Tensor};

/// All learned tensors of one hGRU cell.
///
/// `u_s`/`u_f` are the `1x1xCxC` gate kernels, `w_s`/`w_f` the `ExExCxC`
/// horizontal suppression/facilitation kernels. `alpha`, `mu`, `nu_f` and
/// `omega` are per-channel mixing coefficients; `nu_f` is the facilitation
/// coefficient, distinct from the batch-norm biases in `bn_s`/`bn_f`.
#[derive(Clone, Debug)]
pub struct HGruParams {
    pub u_s: Kernel,
    pub u_f: Kernel,
    pub w_s: Kernel,
    pub w_f: Kernel,
    pub alpha: Tensor,
    pub mu: Tensor,
    pub nu_f: Tensor,
    pub omega: Tensor,
    pub bn_s: BnParams,
    pub bn_f: BnParams,
    pub eps: f64,
}

/// Test-only forcing of the facilitation gate; never set on production
/// paths.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum GateOverride {
    /// `G^F = 0`: the update is the interpolation identity, h stays put.
    FacilitationZero,
    /// `G^F = 1`: the update returns the candidate state.
    FacilitationOne,
}

#[derive(Clone, Debug)]
pub struct HGru {
    pub params: HGruParams,
    gate_override: Option<GateOverride>,
}

impl HGru {
    pub fn new(params: HGruParams) -> HGru {
        HGru { params, gate_override: None }
    }

    /// Defaults: kernels scaled by inverse square-root fan-in, mixing
    /// coefficients `(alpha, mu, nu_f, omega) = (0.1, 0, 1, 0.1)`, identity
    /// batch norm.
    pub fn init<R: Rng>(channels: usize, kernel_extent: usize, rng: &mut R) -> HGru {
        let c = channels;
        let e = kernel_extent;
        let gate_std = 1.0 / (c as f64).sqrt();
        let horiz_std = 1.0 / ((e * e * c) as f64).sqrt();
        HGru::new(HGruParams {
            u_s: Kernel::randn([1, 1, c, c], gate_std, rng).expect("1x1 kernel"),
            u_f: Kernel::randn([1, 1, c, c], gate_std, rng).expect("1x1 kernel"),
            w_s: Kernel::randn([e, e, c, c], horiz_std, rng).expect("odd extent"),
            w_f: Kernel::randn([e, e, c, c], horiz_std, rng).expect("odd extent"),
            alpha: Tensor::full([1, 1, 1, c], 0.1),
            mu: Tensor::zeros([1, 1, 1, c]),
            nu_f: Tensor::ones([1, 1, 1, c]),
            omega: Tensor::full([1, 1, 1, c], 0.1),
            bn_s: BnParams::identity(c),
            bn_f: BnParams::identity(c),
            eps: DEFAULT_BN_EPS,
        })
    }

    /// Test hook: force the facilitation gate to a constant.
    pub fn with_gate_override(mut self, ov: GateOverride) -> HGru {
        self.gate_override = Some(ov);
        self
    }

    pub fn kernel_extent(&self) -> usize {
        self.params.w_s.kh()
    }
}

struct BoundHGru {
    u_s: NodeId,
    u_f: NodeId,
    w_s: NodeId,
    w_f: NodeId,
    alpha: NodeId,
    mu: NodeId,
    nu_f: NodeId,
    omega: NodeId,
    bn_s: (NodeId, NodeId),
    bn_f: (NodeId, NodeId),
    eps: f64,
    gate_override: Option<GateOverride>,
    params: Vec<(String, NodeId)>,
}

impl Cell for HGru {
    fn kind(&self) -> CellKind {
        CellKind::HGru
    }

    fn channels(&self) -> usize {
        self.params.w_s.in_channels()
    }

    fn bind(&self, g: &mut Graph) -> Result<Box<dyn BoundStep>> {
        let p = &self.params;
        let u_s = g.kernel_leaf(&p.u_s)?;
        let u_f = g.kernel_leaf(&p.u_f)?;
        let w_s = g.kernel_leaf(&p.w_s)?;
        let w_f = g.kernel_leaf(&p.w_f)?;
        let alpha = g.leaf(p.alpha.clone())?;
        let mu = g.leaf(p.mu.clone())?;
        let nu_f = g.leaf(p.nu_f.clone())?;
        let omega = g.leaf(p.omega.clone())?;
        let bn_s = (g.leaf(p.bn_s.scale.clone())?, g.leaf(p.bn_s.bias.clone())?);
        let bn_f = (g.leaf(p.bn_f.scale.clone())?, g.leaf(p.bn_f.bias.clone())?);
        let params = vec![
            ("cell.u_s".to_string(), u_s),
            ("cell.u_f".to_string(), u_f),
            ("cell.w_s".to_string(), w_s),
            ("cell.w_f".to_string(), w_f),
            ("cell.alpha".to_string(), alpha),
            ("cell.mu".to_string(), mu),
            ("cell.nu_f".to_string(), nu_f),
            ("cell.omega".to_string(), omega),
            ("cell.bn_s_scale".to_string(), bn_s.0),
            ("cell.bn_s_bias".to_string(), bn_s.1),
            ("cell.bn_f_scale".to_string(), bn_f.0),
            ("cell.bn_f_bias".to_string(), bn_f.1),
        ];
        Ok(Box::new(BoundHGru {
            u_s,
            u_f,
            w_s,
            w_f,
            alpha,
            mu,
            nu_f,
            omega,
            bn_s,
            bn_f,
            eps: p.eps,
            gate_override: self.gate_override,
            params,
        }))
    }

    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        let p = &self.params;
        f("cell.u_s", p.u_s.as_tensor());
        f("cell.u_f", p.u_f.as_tensor());
        f("cell.w_s", p.w_s.as_tensor());
        f("cell.w_f", p.w_f.as_tensor());
        f("cell.alpha", &p.alpha);
        f("cell.mu", &p.mu);
        f("cell.nu_f", &p.nu_f);
        f("cell.omega", &p.omega);
        f("cell.bn_s_scale", &p.bn_s.scale);
        f("cell.bn_s_bias", &p.bn_s.bias);
        f("cell.bn_f_scale", &p.bn_f.scale);
        f("cell.bn_f_bias", &p.bn_f.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let p = &mut self.params;
        for (name, k) in [
            ("cell.u_s", &mut p.u_s),
            ("cell.u_f", &mut p.u_f),
            ("cell.w_s", &mut p.w_s),
            ("cell.w_f", &mut p.w_f),
        ] {
            let mut t = k.as_tensor().clone();
            f(name, &mut t);
            *k = Kernel::new(t).expect("kernel extent unchanged");
        }
        f("cell.alpha", &mut p.alpha);
        f("cell.mu", &mut p.mu);
        f("cell.nu_f", &mut p.nu_f);
        f("cell.omega", &mut p.omega);
        f("cell.bn_s_scale", &mut p.bn_s.scale);
        f("cell.bn_s_bias", &mut p.bn_s.bias);
        f("cell.bn_f_scale", &mut p.bn_f.scale);
        f("cell.bn_f_bias", &mut p.bn_f.bias);
    }
}

impl BoundStep for BoundHGru {
    fn step(&self, g: &mut Graph, z: NodeId, state: &[NodeId]) -> Result<Vec<NodeId>> {
        let h = state[0];
        super::check_channels(
            g.shape_of(z).channels(),
            g.shape_of(h).channels(),
            "hgru_step drive vs state",
        )?;
        let dims = g.shape_of(h).0;

        // Stage 1: suppression.
        let gate_pre = g.conv2d(h, self.u_s)?;
        let g_s = g.sigmoid(gate_pre)?;
        let gated = g.mul(h, g_s)?;
        let conv_s = g.conv2d(gated, self.w_s)?;
        let c_s = g.batch_norm(conv_s, self.bn_s.0, self.bn_s.1, self.eps)?;
        let alpha_b = g.broadcast_channels(self.alpha, dims)?;
        let mu_b = g.broadcast_channels(self.mu, dims)?;
        let gain = g.mul(alpha_b, h)?;
        let gain = g.add(gain, mu_b)?;
        let suppression = g.mul(gain, c_s)?;
        let suppression = g.softplus(suppression)?;
        let s_pre = g.sub(z, suppression)?;
        let s = g.softplus(s_pre)?;

        // Stage 2: facilitation.
        let g_f = match self.gate_override {
            None => {
                let pre = g.conv2d(s, self.u_f)?;
                g.sigmoid(pre)?
            }
            Some(GateOverride::FacilitationZero) => g.leaf(Tensor::zeros(dims))?,
            Some(GateOverride::FacilitationOne) => g.leaf(Tensor::ones(dims))?,
        };
        let conv_f = g.conv2d(s, self.w_f)?;
        let c_f = g.batch_norm(conv_f, self.bn_f.0, self.bn_f.1, self.eps)?;
        let sum_fs = g.add(c_f, s)?;
        let prod_fs = g.mul(c_f, s)?;
        let nu_b = g.broadcast_channels(self.nu_f, dims)?;
        let om_b = g.broadcast_channels(self.omega, dims)?;
        let lin = g.mul(nu_b, sum_fs)?;
        let quad = g.mul(om_b, prod_fs)?;
        let cand_pre = g.add(lin, quad)?;
        let h_tilde = g.softplus(cand_pre)?;

        let keep = g.affine(g_f, -1.0, 1.0)?;
        let old_part = g.mul(keep, h)?;
        let new_part = g.mul(g_f, h_tilde)?;
        let h_new = g.add(old_part, new_part)?;
        Ok(vec![h_new])
    }

    fn params(&self) -> &[(String, NodeId)] {
        &self.params
    }
}
