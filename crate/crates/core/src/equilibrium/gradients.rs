//! The four gradient algorithms and the Lipschitz coefficient penalty.
//!
//! BPTT/TBPTT differentiate a fully recorded unroll. RBP instead treats the
//! final iterate as an equilibrium: one tracked step exposes the Jacobian
//! `J = dF/dh` and the parameter derivative `dF/dw` at that point, the loss
//! cotangent is pushed through `(I - J)^{-1}` by iterating vector-Jacobian
//! products (a Neumann series), and the result is pulled back through the
//! single tracked step. Saved activations are therefore independent of how
//! many forward steps ran. C-RBP adds the penalty
//! `|| (1 . J - lambda)^+ ||_2`, whose gradient needs the tape's
//! differentiable VJP.

use super::{EquilibriumError, Result};
use crate::cells::Cell;
use crate::tape::{Graph, NodeId, Result as TapeResult};
use crate::tensor::Tensor;

/// Gradients keyed by parameter name, in binding order.
pub type NamedGrads = Vec<(String, Tensor)>;

/// Neumann-series truncation settings for the implicit backward solve.
#[derive(Clone, Copy, Debug)]
pub struct ImplicitCfg {
    pub neumann_terms: usize,
    pub neumann_tol: f64,
}

impl Default for ImplicitCfg {
    fn default() -> Self {
        ImplicitCfg {
            neumann_terms: 15,
            neumann_tol: 1e-6,
        }
    }
}

/// [`ImplicitCfg`] plus the penalty knobs of C-RBP.
#[derive(Clone, Copy, Debug)]
pub struct CrbpCfg {
    pub implicit: ImplicitCfg,
    pub lambda: f64,
    pub penalty_weight: f64,
}

/// How the Neumann recursion ended.
#[derive(Clone, Copy, Debug)]
pub struct NeumannOutcome {
    pub terms_used: usize,
    /// False when the step budget ran out before the increment fell below
    /// tolerance; a warning, not an error, mirroring how an unstable cell
    /// degrades rather than halts training.
    pub converged: bool,
    pub last_delta: f64,
}

/// Approximate `v = seed (I - J)^{-1}` by iterating
/// `v_{k+1} = seed + v_k J`, where `vjp_fn` applies `v J`.
pub fn neumann_adjoint(
    vjp_fn: &mut dyn FnMut(&[Tensor]) -> TapeResult<Vec<Tensor>>,
    seed: &[Tensor],
    max_terms: usize,
    tol: f64,
) -> Result<(Vec<Tensor>, NeumannOutcome)> {
    if max_terms < 1 {
        return Err(EquilibriumError::InvalidConfig(
            "neumann_terms must be >= 1".into(),
        ));
    }
    if tol <= 0.0 {
        return Err(EquilibriumError::InvalidConfig("neumann tol must be > 0".into()));
    }
    let mut v: Vec<Tensor> = seed.to_vec();
    let mut outcome = NeumannOutcome {
        terms_used: 0,
        converged: false,
        last_delta: f64::INFINITY,
    };
    for k in 1..=max_terms {
        let jv = vjp_fn(&v)?;
        let mut next = Vec::with_capacity(v.len());
        for (s, j) in seed.iter().zip(jv.iter()) {
            next.push(s.add(j)?);
        }
        let mut delta = 0.0;
        for (n, o) in next.iter().zip(v.iter()) {
            let d = n.distance(o)?;
            delta += d * d;
        }
        let delta = delta.sqrt();
        v = next;
        outcome.terms_used = k;
        outcome.last_delta = delta;
        if delta <= tol {
            outcome.converged = true;
            break;
        }
    }
    Ok((v, outcome))
}

/// A loss recorded on the graph: the scalar node plus any parameter leaves
/// the loss introduced (e.g. the readout head's).
pub struct LossBuild {
    pub loss: NodeId,
    pub params: Vec<(String, NodeId)>,
}

/// Builder callback: given the state nodes the loss should read (part 0 is
/// h), record the loss.
pub type LossBuilder<'a> = dyn FnMut(&mut Graph, &[NodeId]) -> TapeResult<LossBuild> + 'a;

/// Exact reverse-mode gradients through a recorded unroll. The unroll holds
/// the full trajectory by construction; its saved activations grow linearly
/// with the step count.
pub fn bptt_grads(
    g: &Graph,
    run: &super::TrackedUnroll,
    loss: NodeId,
    extra_wrt: &[(String, NodeId)],
) -> Result<NamedGrads> {
    let mut names: Vec<String> = Vec::new();
    let mut ids: Vec<NodeId> = Vec::new();
    for (n, id) in run.params.iter().chain(extra_wrt.iter()) {
        names.push(n.clone());
        ids.push(*id);
    }
    let grads = g.grad(loss, &ids)?;
    Ok(names.into_iter().zip(grads).collect())
}

/// Truncated BPTT: identical to [`bptt_grads`] on an unroll built with a
/// window, which detached the state before the last `K` transitions.
pub fn tbptt_grads(
    g: &Graph,
    run: &super::TrackedUnroll,
    loss: NodeId,
    extra_wrt: &[(String, NodeId)],
) -> Result<NamedGrads> {
    debug_assert!(run.window.is_some(), "tbptt expects a windowed unroll");
    bptt_grads(g, run, loss, extra_wrt)
}

/// Everything the implicit backward pass produces.
pub struct ImplicitGrads {
    pub grads: NamedGrads,
    pub loss: f64,
    pub neumann: NeumannOutcome,
    /// Penalty value when the C-RBP path ran.
    pub penalty: Option<f64>,
}

/// Low-level RBP on a caller-prepared graph.
///
/// `x` is the drive node (it may be fed by recorded input-stage nodes, whose
/// parameter leaves go in `extra_wrt`); `h_star` is the equilibrium reached
/// by an untracked forward pass. Records exactly one tracked step.
pub fn rbp_grads_at(
    g: &mut Graph,
    cell: &dyn Cell,
    x: NodeId,
    h_star: &[Tensor],
    loss_build: &mut LossBuilder,
    extra_wrt: &[(String, NodeId)],
    cfg: &ImplicitCfg,
) -> Result<ImplicitGrads> {
    implicit_grads_at(g, cell, x, h_star, loss_build, extra_wrt, cfg, None)
}

/// Low-level C-RBP: RBP plus the Lipschitz coefficient penalty evaluated at
/// the same tracked step, with the penalty gradient taken by ordinary
/// backprop through the recorded VJP.
pub fn crbp_grads_at(
    g: &mut Graph,
    cell: &dyn Cell,
    x: NodeId,
    h_star: &[Tensor],
    loss_build: &mut LossBuilder,
    extra_wrt: &[(String, NodeId)],
    cfg: &CrbpCfg,
) -> Result<ImplicitGrads> {
    implicit_grads_at(
        g,
        cell,
        x,
        h_star,
        loss_build,
        extra_wrt,
        &cfg.implicit,
        Some((cfg.lambda, cfg.penalty_weight)),
    )
}

#[allow(clippy::too_many_arguments)]
fn implicit_grads_at(
    g: &mut Graph,
    cell: &dyn Cell,
    x: NodeId,
    h_star: &[Tensor],
    loss_build: &mut LossBuilder,
    extra_wrt: &[(String, NodeId)],
    cfg: &ImplicitCfg,
    penalty: Option<(f64, f64)>,
) -> Result<ImplicitGrads> {
    let bound = cell.bind(g)?;
    let h_leaves: Vec<NodeId> = h_star
        .iter()
        .map(|t| g.leaf(t.clone()))
        .collect::<TapeResult<_>>()?;
    let next = bound.step(g, x, &h_leaves)?;

    // Loss and readout-side gradients at the equilibrium itself.
    let built = loss_build(g, &h_leaves)?;
    let loss_value = g.value(built.loss).item()?;
    let mut head_wrt: Vec<NodeId> = h_leaves.clone();
    head_wrt.extend(built.params.iter().map(|(_, id)| *id));
    let head_grads = g.grad(built.loss, &head_wrt)?;
    let seed: Vec<Tensor> = head_grads[..h_leaves.len()].to_vec();
    let loss_param_grads: Vec<Tensor> = head_grads[h_leaves.len()..].to_vec();

    // v = seed (I - J)^{-1} via iterated VJPs against the tracked step.
    let mut vjp_fn = |v: &[Tensor]| g.vjp_multi(&next, v, &h_leaves);
    let (v, neumann) = neumann_adjoint(&mut vjp_fn, &seed, cfg.neumann_terms, cfg.neumann_tol)?;

    // Pull the adjoint back through the tracked step into the recurrent
    // parameters and anything upstream of the drive.
    let mut names: Vec<String> = Vec::new();
    let mut ids: Vec<NodeId> = Vec::new();
    for (n, id) in bound.params().iter().chain(extra_wrt.iter()) {
        names.push(n.clone());
        ids.push(*id);
    }
    let pulled = g.vjp_multi(&next, &v, &ids)?;
    let mut grads: NamedGrads = names.into_iter().zip(pulled).collect();
    for ((n, _), t) in built.params.iter().zip(loss_param_grads) {
        grads.push((n.clone(), t));
    }

    // C-RBP: penalty at the same tracked step; its gradient flows by plain
    // backprop through the recorded adjoint subgraph, not the implicit path.
    let mut penalty_value = None;
    if let Some((lambda, weight)) = penalty {
        if !(0.0..1.0).contains(&lambda) {
            return Err(EquilibriumError::InvalidConfig(format!(
                "lambda must be in [0, 1), got {lambda}"
            )));
        }
        let pen = lcp_penalty_at(g, &next, &h_leaves, lambda)?;
        penalty_value = Some(g.value(pen).item()?);
        if weight != 0.0 {
            let wrt: Vec<NodeId> = bound
                .params()
                .iter()
                .chain(extra_wrt.iter())
                .map(|(_, id)| *id)
                .collect();
            let pen_grads = g.grad(pen, &wrt)?;
            for ((_, total), pg) in grads.iter_mut().zip(pen_grads) {
                *total = total.add(&pg.scale(weight))?;
            }
        }
    }

    Ok(ImplicitGrads {
        grads,
        loss: loss_value,
        neumann,
        penalty: penalty_value,
    })
}

/// Convenience RBP entry point for a plain drive tensor.
pub fn rbp_grads(
    cell: &dyn Cell,
    x: &Tensor,
    h_star: &[Tensor],
    loss_build: &mut LossBuilder,
    cfg: &ImplicitCfg,
) -> Result<ImplicitGrads> {
    let mut g = Graph::new();
    let xn = g.leaf(x.clone())?;
    rbp_grads_at(&mut g, cell, xn, h_star, loss_build, &[], cfg)
}

/// Convenience C-RBP entry point for a plain drive tensor.
pub fn crbp_grads(
    cell: &dyn Cell,
    x: &Tensor,
    h_star: &[Tensor],
    loss_build: &mut LossBuilder,
    cfg: &CrbpCfg,
) -> Result<ImplicitGrads> {
    let mut g = Graph::new();
    let xn = g.leaf(x.clone())?;
    crbp_grads_at(&mut g, cell, xn, h_star, loss_build, &[], cfg)
}

/// Record the Lipschitz coefficient penalty at an already-recorded step:
/// push the all-ones cotangent through the step's Jacobian with a
/// differentiable VJP, rectify above `lambda`, take the Euclidean norm.
pub fn lcp_penalty_at(
    g: &mut Graph,
    next: &[NodeId],
    h_leaves: &[NodeId],
    lambda: f64,
) -> TapeResult<NodeId> {
    let ones: Vec<NodeId> = next
        .iter()
        .map(|&n| {
            let dims = g.shape_of(n).0;
            g.leaf(Tensor::ones(dims))
        })
        .collect::<TapeResult<_>>()?;
    let u = g.vjp_tracked_multi(next, &ones, h_leaves)?;
    let mut cat = u[0];
    for &part in &u[1..] {
        cat = g.concat_channels(cat, part)?;
    }
    let shifted = g.affine(cat, 1.0, -lambda)?;
    let rect = g.relu(shifted)?;
    g.l2_norm(rect)
}

/// A standalone penalty graph for one cell at one evaluation point.
pub struct LcpBuild {
    pub graph: Graph,
    pub penalty: NodeId,
    pub params: Vec<(String, NodeId)>,
}

/// Build the penalty `|| (1 . J_{F,h} - lambda)^+ ||_2` from scratch. The
/// returned graph can be differentiated with respect to the cell parameters,
/// which exercises double-backward through the cell's ops; cells whose
/// nonlinearities lack a second derivative (relu) report an unsupported-op
/// error.
pub fn lcp_penalty(cell: &dyn Cell, x: &Tensor, h_eval: &[Tensor], lambda: f64) -> Result<LcpBuild> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(EquilibriumError::InvalidConfig(format!(
            "lambda must be in [0, 1), got {lambda}"
        )));
    }
    let mut g = Graph::new();
    let xn = g.leaf(x.clone())?;
    let bound = cell.bind(&mut g)?;
    let h_leaves: Vec<NodeId> = h_eval
        .iter()
        .map(|t| g.leaf(t.clone()))
        .collect::<TapeResult<_>>()?;
    let next = bound.step(&mut g, xn, &h_leaves)?;
    let penalty = lcp_penalty_at(&mut g, &next, &h_leaves, lambda)?;
    let params = bound.params().to_vec();
    Ok(LcpBuild {
        graph: g,
        penalty,
        params,
    })
}

/// Penalty value only, via a plain (non-differentiable) VJP. Cheap enough to
/// log every epoch for any algorithm.
pub fn lcp_value(cell: &dyn Cell, x: &Tensor, h_eval: &[Tensor], lambda: f64) -> Result<f64> {
    let mut g = Graph::new();
    let xn = g.leaf(x.clone())?;
    let bound = cell.bind(&mut g)?;
    let h_leaves: Vec<NodeId> = h_eval
        .iter()
        .map(|t| g.leaf(t.clone()))
        .collect::<TapeResult<_>>()?;
    let next = bound.step(&mut g, xn, &h_leaves)?;
    let ones: Vec<Tensor> = next.iter().map(|&n| Tensor::ones(g.shape_of(n).0)).collect();
    let u = g.vjp_multi(&next, &ones, &h_leaves)?;
    let mut acc = 0.0;
    for part in u {
        for &v in part.data() {
            let r = (v - lambda).max(0.0);
            acc += r * r;
        }
    }
    Ok(acc.sqrt())
}

/// Empirical contraction probe: `||F(h1) - F(h2)|| / ||h1 - h2||`.
pub fn contraction_ratio(
    cell: &dyn Cell,
    x: &Tensor,
    h1: &[Tensor],
    h2: &[Tensor],
) -> Result<f64> {
    let mut denom = 0.0;
    for (a, b) in h1.iter().zip(h2.iter()) {
        let d = a.distance(b)?;
        denom += d * d;
    }
    let denom = denom.sqrt();
    if denom == 0.0 {
        return Err(EquilibriumError::DegeneratePair);
    }
    let f1 = crate::cells::step_values(cell, x, h1, None)?;
    let f2 = crate::cells::step_values(cell, x, h2, None)?;
    let mut num = 0.0;
    for (a, b) in f1.iter().zip(f2.iter()) {
        let d = a.distance(b)?;
        num += d * d;
    }
    Ok(num.sqrt() / denom)
}
