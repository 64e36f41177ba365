//! Forward dynamics of recurrent cells: explicit unrolling and fixed-point
//! solving, plus the configuration enum for the gradient algorithms built on
//! top of them (see [`gradients`]).

pub mod gradients;

pub use gradients::{
    bptt_grads, contraction_ratio, crbp_grads, crbp_grads_at, lcp_penalty, lcp_penalty_at,
    lcp_value, neumann_adjoint, rbp_grads, rbp_grads_at, tbptt_grads, CrbpCfg, ImplicitCfg,
    ImplicitGrads, LcpBuild, LossBuild, NamedGrads, NeumannOutcome,
};

use std::rc::Rc;

use crate::cells::{step_values, BoundStep, Cell};
use crate::tape::{Graph, Meter, NodeId, TapeError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum EquilibriumError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("non-finite state at step {step}")]
    NonFiniteState { step: usize },
    #[error("dynamics diverging at step {step}: residual {residual:.3e} grew more than 10x over 10 steps")]
    Diverged { step: usize, residual: f64 },
    #[error("contraction ratio undefined: the two probe states are identical")]
    DegeneratePair,
    #[error("truncation window {window} out of range 1..={steps}")]
    WindowOutOfRange { window: usize, steps: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl From<TensorError> for EquilibriumError {
    fn from(e: TensorError) -> Self {
        EquilibriumError::Tape(e.into())
    }
}

pub type Result<T> = std::result::Result<T, EquilibriumError>;

/// Outcome of running the forward dynamics.
#[derive(Clone, Debug)]
pub struct EquilibriumResult {
    /// Final state parts (part 0 is the hidden state).
    pub state: Vec<Tensor>,
    /// `||h_{t+1} - h_t||_2` over all state parts at the last transition.
    pub residual: f64,
    pub steps_taken: usize,
    pub converged: bool,
    /// `trajectory[t]` is the state after `t` steps; index 0 is the initial
    /// state. Retained only on request.
    pub trajectory: Option<Vec<Vec<Tensor>>>,
}

/// Which gradient algorithm the harness runs, with its knobs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GradAlgorithm {
    Bptt,
    Tbptt { window: usize },
    Rbp { neumann_terms: usize, neumann_tol: f64 },
    Crbp { neumann_terms: usize, neumann_tol: f64, lambda: f64, penalty_weight: f64 },
}

impl GradAlgorithm {
    pub fn name(&self) -> &'static str {
        match self {
            GradAlgorithm::Bptt => "bptt",
            GradAlgorithm::Tbptt { .. } => "tbptt",
            GradAlgorithm::Rbp { .. } => "rbp",
            GradAlgorithm::Crbp { .. } => "crbp",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            GradAlgorithm::Bptt => Ok(()),
            GradAlgorithm::Tbptt { window } if window >= 1 => Ok(()),
            GradAlgorithm::Tbptt { window } => Err(EquilibriumError::InvalidConfig(format!(
                "tbptt window must be >= 1, got {window}"
            ))),
            GradAlgorithm::Rbp { neumann_terms, .. } if neumann_terms >= 1 => Ok(()),
            GradAlgorithm::Rbp { neumann_terms, .. } => Err(EquilibriumError::InvalidConfig(
                format!("neumann_terms must be >= 1, got {neumann_terms}"),
            )),
            GradAlgorithm::Crbp { neumann_terms, lambda, .. } => {
                if neumann_terms < 1 {
                    return Err(EquilibriumError::InvalidConfig(format!(
                        "neumann_terms must be >= 1, got {neumann_terms}"
                    )));
                }
                if !(0.0..1.0).contains(&lambda) {
                    return Err(EquilibriumError::InvalidConfig(format!(
                        "lambda must be in [0, 1), got {lambda}"
                    )));
                }
                Ok(())
            }
        }
    }
}

fn state_residual(new: &[Tensor], old: &[Tensor]) -> Result<f64> {
    let mut acc = 0.0;
    for (n, o) in new.iter().zip(old.iter()) {
        let d = n.distance(o)?;
        acc += d * d;
    }
    Ok(acc.sqrt())
}

fn map_step_err(e: TapeError, step: usize) -> EquilibriumError {
    match e {
        TapeError::Tensor(TensorError::NonFinite { .. }) => {
            EquilibriumError::NonFiniteState { step }
        }
        other => EquilibriumError::Tape(other),
    }
}

/// Apply the cell `steps` times from `h0` under the constant drive `x`.
/// Each step runs on a scratch graph (shared with `meter` when given), so
/// nothing is retained for backward unless `retain` asks for the value
/// trajectory.
pub fn forward_unroll(
    cell: &dyn Cell,
    x: &Tensor,
    h0: &[Tensor],
    steps: usize,
    retain: bool,
    meter: Option<Rc<Meter>>,
) -> Result<EquilibriumResult> {
    if steps < 1 {
        return Err(EquilibriumError::InvalidConfig("steps must be >= 1".into()));
    }
    let mut state: Vec<Tensor> = h0.to_vec();
    let mut trajectory = retain.then(|| vec![state.clone()]);
    let mut residual = f64::INFINITY;
    for t in 1..=steps {
        let new = step_values(cell, x, &state, meter.clone()).map_err(|e| map_step_err(e, t))?;
        residual = state_residual(&new, &state)?;
        state = new;
        if let Some(traj) = trajectory.as_mut() {
            traj.push(state.clone());
        }
    }
    Ok(EquilibriumResult {
        state,
        residual,
        steps_taken: steps,
        converged: residual == 0.0,
        trajectory,
    })
}

/// Iterate the cell until the step-to-step residual drops to `tol`, the step
/// budget runs out, or the residual is clearly growing (more than 10x over a
/// 10-step lookback), which aborts with a divergence diagnostic.
pub fn fixed_point_solve(
    cell: &dyn Cell,
    x: &Tensor,
    h0: &[Tensor],
    tol: f64,
    max_steps: usize,
    meter: Option<Rc<Meter>>,
) -> Result<EquilibriumResult> {
    if tol <= 0.0 {
        return Err(EquilibriumError::InvalidConfig("tol must be > 0".into()));
    }
    if max_steps < 1 {
        return Err(EquilibriumError::InvalidConfig("max_steps must be >= 1".into()));
    }
    let mut state: Vec<Tensor> = h0.to_vec();
    let mut residuals: Vec<f64> = Vec::new();
    for t in 1..=max_steps {
        let new = step_values(cell, x, &state, meter.clone()).map_err(|e| map_step_err(e, t))?;
        let residual = state_residual(&new, &state)?;
        state = new;
        residuals.push(residual);
        if residual <= tol {
            return Ok(EquilibriumResult {
                state,
                residual,
                steps_taken: t,
                converged: true,
                trajectory: None,
            });
        }
        if t > 10 && residual > 10.0 * residuals[t - 1 - 10] {
            return Err(EquilibriumError::Diverged { step: t, residual });
        }
    }
    Ok(EquilibriumResult {
        state,
        residual: *residuals.last().expect("at least one step"),
        steps_taken: max_steps,
        converged: false,
        trajectory: None,
    })
}

/// A fully recorded unroll: every step lives on one graph so exact
/// backpropagation through time is possible. Saved activations therefore
/// grow linearly with `steps`.
pub struct TrackedUnroll {
    pub x: NodeId,
    pub h0: Vec<NodeId>,
    /// `states[t-1]` is the state after step `t`.
    pub states: Vec<Vec<NodeId>>,
    pub params: Vec<(String, NodeId)>,
    pub bound: Box<dyn BoundStep>,
    pub window: Option<usize>,
}

impl TrackedUnroll {
    pub fn final_state(&self) -> &[NodeId] {
        self.states.last().expect("at least one step")
    }
}

/// Record `steps` transitions on `g`. With `window = Some(K)` the state is
/// detached before the last `K` transitions, truncating gradient flow there.
pub fn unroll_tracked(
    g: &mut Graph,
    cell: &dyn Cell,
    x: NodeId,
    h0: &[Tensor],
    steps: usize,
    window: Option<usize>,
) -> Result<TrackedUnroll> {
    if steps < 1 {
        return Err(EquilibriumError::InvalidConfig("steps must be >= 1".into()));
    }
    if let Some(k) = window {
        if k < 1 || k > steps {
            return Err(EquilibriumError::WindowOutOfRange { window: k, steps });
        }
    }
    let bound = cell.bind(g)?;
    let h0_nodes: Vec<NodeId> = h0
        .iter()
        .map(|t| g.leaf(t.clone()))
        .collect::<crate::tape::Result<_>>()?;
    let mut state = h0_nodes.clone();
    let mut states = Vec::with_capacity(steps);
    for t in 1..=steps {
        if let Some(k) = window {
            if t - 1 == steps - k {
                state = state
                    .iter()
                    .map(|&n| g.detach(n))
                    .collect::<crate::tape::Result<_>>()?;
            }
        }
        state = bound.step(g, x, &state).map_err(|e| map_step_err(e, t))?;
        states.push(state.clone());
    }
    let params = bound.params().to_vec();
    Ok(TrackedUnroll {
        x,
        h0: h0_nodes,
        states,
        params,
        bound,
        window,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{DenseLinearCell, IdentityCell};

    fn scalar_state(v: f64) -> Vec<Tensor> {
        vec![Tensor::scalar(v)]
    }

    #[test]
    fn unroll_one_step_equals_single_cell_step() {
        let cell = DenseLinearCell::scalar(0.5);
        let x = Tensor::scalar(1.0);
        let r = forward_unroll(&cell, &x, &scalar_state(0.0), 1, false, None).unwrap();
        assert_eq!(r.state[0].data()[0], 1.0);
        assert_eq!(r.steps_taken, 1);
    }

    #[test]
    fn unroll_identity_cell_sits_at_fixed_point() {
        let cell = IdentityCell { channels: 2 };
        let h0 = vec![Tensor::new([1, 1, 1, 2], vec![0.3, -0.7]).unwrap()];
        let x = Tensor::zeros([1, 1, 1, 2]);
        let r = forward_unroll(&cell, &x, &h0, 7, false, None).unwrap();
        assert_eq!(r.state[0].data(), h0[0].data());
        assert_eq!(r.residual, 0.0);
        assert!(r.converged);
    }

    #[test]
    fn unroll_linear_stub_matches_geometric_series() {
        // h_{t+1} = 0.5 h_t + 0.5 from h_0 = 0: partial sums of the
        // geometric series, h_3 = 0.5 + 0.25 + 0.125 = 0.875.
        let cell = DenseLinearCell::scalar(0.5);
        let x = Tensor::scalar(0.5);
        let r = forward_unroll(&cell, &x, &scalar_state(0.0), 3, true, None).unwrap();
        assert!((r.state[0].data()[0] - 0.875).abs() < 1e-15);
        let traj = r.trajectory.unwrap();
        assert_eq!(traj.len(), 4);
        assert_eq!(traj[0][0].data()[0], 0.0);
        assert!((traj[1][0].data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn unroll_rejects_zero_steps() {
        let cell = DenseLinearCell::scalar(0.5);
        let x = Tensor::scalar(0.0);
        assert!(forward_unroll(&cell, &x, &scalar_state(0.0), 0, false, None).is_err());
    }

    #[test]
    fn fixed_point_of_contractive_scalar_map() {
        let cell = DenseLinearCell::scalar(0.5);
        let x = Tensor::scalar(1.0);
        let r = fixed_point_solve(&cell, &x, &scalar_state(0.0), 1e-8, 200, None).unwrap();
        assert!(r.converged);
        assert!((r.state[0].data()[0] - 2.0).abs() < 1e-7);
        // Fixed-point validity: || h* - F(h*) || <= tol after convergence.
        let next = crate::cells::step_values(&cell, &x, &r.state, None).unwrap();
        assert!(next[0].distance(&r.state[0]).unwrap() <= 1e-8);
    }

    #[test]
    fn fixed_point_identity_converges_immediately() {
        let cell = IdentityCell { channels: 1 };
        let h0 = scalar_state(3.25);
        let r = fixed_point_solve(&cell, &Tensor::scalar(0.0), &h0, 1e-10, 50, None).unwrap();
        assert!(r.converged);
        assert_eq!(r.steps_taken, 1);
        assert_eq!(r.state[0].data()[0], 3.25);
    }

    #[test]
    fn fixed_point_expansive_map_aborts_with_divergence() {
        let cell = DenseLinearCell::scalar(2.0);
        let err =
            fixed_point_solve(&cell, &Tensor::scalar(0.0), &scalar_state(1.0), 1e-9, 500, None)
                .unwrap_err();
        assert!(matches!(err, EquilibriumError::Diverged { .. }), "got {err}");
    }

    #[test]
    fn fixed_point_reports_honest_non_convergence() {
        // Slow contraction, tiny budget.
        let cell = DenseLinearCell::scalar(0.999);
        let r = fixed_point_solve(&cell, &Tensor::scalar(1.0), &scalar_state(0.0), 1e-12, 5, None)
            .unwrap();
        assert!(!r.converged);
        assert_eq!(r.steps_taken, 5);
    }

    #[test]
    fn tracked_unroll_window_validation() {
        let cell = DenseLinearCell::scalar(0.5);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.0)).unwrap();
        match unroll_tracked(&mut g, &cell, x, &scalar_state(0.0), 4, Some(5)) {
            Err(EquilibriumError::WindowOutOfRange { .. }) => {}
            Err(other) => panic!("unexpected error {other}"),
            Ok(_) => panic!("window > steps must be rejected"),
        }
        assert!(unroll_tracked(&mut g, &cell, x, &scalar_state(0.0), 4, Some(4)).is_ok());
    }
}
