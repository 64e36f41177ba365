//! Central-difference gradient checking.
//!
//! The checks here evaluate a scalar function twice per coordinate with the
//! coordinate perturbed, so they are independent of the tape's backward
//! rules by construction. Used by the test suites and by the `gradcheck`
//! CLI subcommand.

use crate::tape::Result;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Magnitude floor for relative errors: below it, differences are measured
/// against the floor instead of the (near-zero) values themselves.
pub const DEFAULT_FLOOR: f64 = 1e-4;

/// `|a - b| / max(floor, |a|, |b|)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / floor.max(a.abs()).max(b.abs())
}

/// Central finite differences of `f` at `x0`, one coordinate at a time.
pub fn central_diff(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    x0: &[f64],
    step: f64,
) -> Result<Vec<f64>> {
    let mut x = x0.to_vec();
    let mut out = Vec::with_capacity(x0.len());
    for i in 0..x0.len() {
        let orig = x[i];
        x[i] = orig + step;
        let hi = f(&x)?;
        x[i] = orig - step;
        let lo = f(&x)?;
        x[i] = orig;
        out.push((hi - lo) / (2.0 * step));
    }
    Ok(out)
}

/// One compared coordinate, in the layout the gradcheck CSV uses.
#[derive(Clone, Debug)]
pub struct CheckRow {
    pub op_name: String,
    pub param_name: String,
    pub analytic: f64,
    pub finite_diff: f64,
    pub rel_err: f64,
}

impl CheckRow {
    pub fn csv_header() -> &'static str {
        "op_name,param_name,analytic,finite_diff,rel_err"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.op_name, self.param_name, self.analytic, self.finite_diff, self.rel_err
        )
    }
}

/// Compare an analytic gradient against central differences of `f` at `x0`.
/// `param_name` rows are `name[i]` per flat coordinate.
pub fn compare_gradient(
    op_name: &str,
    param_name: &str,
    analytic: &[f64],
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    x0: &[f64],
    step: f64,
    floor: f64,
) -> Result<Vec<CheckRow>> {
    assert_eq!(analytic.len(), x0.len(), "gradient/point length mismatch");
    let fd = central_diff(f, x0, step)?;
    Ok(analytic
        .iter()
        .zip(fd.iter())
        .enumerate()
        .map(|(i, (&a, &d))| CheckRow {
            op_name: op_name.to_string(),
            param_name: format!("{param_name}[{i}]"),
            analytic: a,
            finite_diff: d,
            rel_err: rel_err(a, d, floor),
        })
        .collect())
}

/// Largest relative error in a set of rows; 0 for an empty set.
pub fn max_rel_err(rows: &[CheckRow]) -> f64 {
    rows.iter().fold(0.0, |m, r| m.max(r.rel_err))
}

/// A named check suite: rows plus the tolerance they must meet.
pub struct Suite {
    pub name: &'static str,
    pub tolerance: f64,
    pub rows: Vec<CheckRow>,
}

impl Suite {
    pub fn max_rel_err(&self) -> f64 {
        max_rel_err(&self.rows)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tolerance
    }
}

/// Fixed-point gradients of random contractive linear systems, checked
/// against central differences taken through a re-solved fixed point.
pub fn suite_linear() -> Result<Suite> {
    use crate::cells::DenseLinearCell;
    use crate::equilibrium::{fixed_point_solve, rbp_grads, ImplicitCfg, LossBuild};
    use crate::linalg;
    use rand::SeedableRng;

    let mut rows = Vec::new();
    for (case, &dim) in [3usize, 4, 5].iter().enumerate() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(900 + case as u64);
        let w = linalg::random_with_spectral_norm(dim, 0.6, &mut rng);
        let x = crate::tensor::Tensor::new(
            [1, 1, 1, dim],
            (0..dim).map(|i| 0.3 + 0.1 * i as f64).collect(),
        )?;
        let r: Vec<f64> = (0..dim).map(|i| 1.0 - 0.2 * i as f64).collect();
        let rt = crate::tensor::Tensor::new([1, 1, 1, dim], r.clone())?;

        let loss_through_fixed_point = |wflat: &[f64]| -> Result<f64> {
            let m: Vec<Vec<f64>> = (0..dim)
                .map(|o| (0..dim).map(|i| wflat[i * dim + o]).collect())
                .collect();
            let cell = DenseLinearCell::from_matrix(&m);
            let h0 = vec![crate::tensor::Tensor::zeros([1, 1, 1, dim])];
            let solved = fixed_point_solve(&cell, &x, &h0, 1e-13, 2000, None)
                .map_err(|e| match e {
                    crate::equilibrium::EquilibriumError::Tape(t) => t,
                    other => crate::tape::TapeError::Tensor(crate::tensor::TensorError::NonFinite {
                        op: other.to_string(),
                    }),
                })?;
            Ok(solved.state[0].dot(&rt)?)
        };

        let cell = DenseLinearCell::from_matrix(&w);
        let h0 = vec![crate::tensor::Tensor::zeros([1, 1, 1, dim])];
        let solved = fixed_point_solve(&cell, &x, &h0, 1e-13, 2000, None).map_err(|e| {
            crate::tape::TapeError::Tensor(crate::tensor::TensorError::NonFinite { op: e.to_string() })
        })?;
        let mut loss = |g: &mut crate::tape::Graph, state: &[crate::tape::NodeId]| {
            let rl = g.leaf(rt.clone())?;
            let p = g.mul(state[0], rl)?;
            let l = g.sum_all(p)?;
            Ok(LossBuild { loss: l, params: vec![] })
        };
        let cfg = ImplicitCfg { neumann_terms: 400, neumann_tol: 1e-13 };
        let out = rbp_grads(&cell, &x, &solved.state, &mut loss, &cfg).map_err(|e| {
            crate::tape::TapeError::Tensor(crate::tensor::TensorError::NonFinite { op: e.to_string() })
        })?;
        let analytic = &out.grads.iter().find(|(n, _)| n == "cell.w").unwrap().1;

        let w_flat: Vec<f64> = analytic
            .data()
            .iter()
            .enumerate()
            .map(|(idx, _)| {
                let (i, o) = (idx / dim, idx % dim);
                w[o][i]
            })
            .collect();
        let mut f = |flat: &[f64]| loss_through_fixed_point(flat);
        rows.extend(compare_gradient(
            &format!("rbp_linear_dim{dim}"),
            "cell.w",
            analytic.data(),
            &mut f,
            &w_flat,
            1e-6,
            DEFAULT_FLOOR,
        )?);
    }
    Ok(Suite { name: "linear", tolerance: 1e-4, rows })
}

/// Finite-difference check of a two-step hGRU unroll, every parameter.
pub fn suite_hgru() -> Result<Suite> {
    use crate::cells::{Cell, HGru};
    use rand::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(910);
    let cell = HGru::init(2, 3, &mut rng);
    let x = crate::tensor::Tensor::randn([1, 4, 4, 2], 0.8, &mut rng);
    let h0 = crate::tensor::Tensor::randn([1, 4, 4, 2], 0.5, &mut rng).map(f64::abs);
    let weights = crate::tensor::Tensor::randn([1, 4, 4, 2], 1.0, &mut rng);

    let unrolled_loss = |cell: &HGru| -> Result<f64> {
        let mut g = crate::tape::Graph::new();
        let xn = g.leaf(x.clone())?;
        let h = g.leaf(h0.clone())?;
        let bound = cell.bind(&mut g)?;
        let s1 = bound.step(&mut g, xn, &[h])?;
        let s2 = bound.step(&mut g, xn, &s1)?;
        let w = g.leaf(weights.clone())?;
        let p = g.mul(s2[0], w)?;
        let loss = g.sum_all(p)?;
        Ok(g.value(loss).item()?)
    };

    let mut g = crate::tape::Graph::new();
    let xn = g.leaf(x.clone())?;
    let h = g.leaf(h0.clone())?;
    let bound = cell.bind(&mut g)?;
    let s1 = bound.step(&mut g, xn, &[h])?;
    let s2 = bound.step(&mut g, xn, &s1)?;
    let w = g.leaf(weights.clone())?;
    let p = g.mul(s2[0], w)?;
    let loss = g.sum_all(p)?;
    let params = bound.params().to_vec();
    let ids: Vec<_> = params.iter().map(|(_, id)| *id).collect();
    let grads = g.grad(loss, &ids)?;

    let mut rows = Vec::new();
    for ((name, _), grad) in params.iter().zip(grads.iter()) {
        let mut current = None;
        cell.visit_params(&mut |n, t| {
            if n == name {
                current = Some(t.clone());
            }
        });
        let current = current.expect("named param");
        let mut f = |flat: &[f64]| {
            let mut perturbed = cell.clone();
            perturbed.visit_params_mut(&mut |n, t| {
                if n == name {
                    *t = crate::tensor::Tensor::new(t.dims(), flat.to_vec()).unwrap();
                }
            });
            unrolled_loss(&perturbed)
        };
        rows.extend(compare_gradient(
            "hgru_two_step",
            name,
            grad.data(),
            &mut f,
            current.data(),
            DEFAULT_STEP,
            DEFAULT_FLOOR,
        )?);
    }
    Ok(Suite { name: "hgru", tolerance: 1e-5, rows })
}

/// Double-backward check: the gradient of the Lipschitz coefficient penalty
/// with respect to every cell parameter against central differences of the
/// plain-VJP penalty value.
pub fn suite_lcp() -> Result<Suite> {
    use crate::cells::{Cell, HGru};
    use crate::equilibrium::{lcp_penalty, lcp_value};
    use rand::SeedableRng;

    let lambda = 0.5;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(920);
    let cell = HGru::init(2, 3, &mut rng);
    let x = crate::tensor::Tensor::randn([1, 3, 3, 2], 0.8, &mut rng);
    let h = crate::tensor::Tensor::randn([1, 3, 3, 2], 0.6, &mut rng).map(f64::abs);

    let build = lcp_penalty(&cell, &x, &[h.clone()], lambda).map_err(|e| {
        crate::tape::TapeError::Tensor(crate::tensor::TensorError::NonFinite { op: e.to_string() })
    })?;
    let ids: Vec<_> = build.params.iter().map(|(_, id)| *id).collect();
    let grads = build.graph.grad(build.penalty, &ids)?;

    let mut rows = Vec::new();
    for ((name, _), grad) in build.params.iter().zip(grads.iter()) {
        let mut current = None;
        cell.visit_params(&mut |n, t| {
            if n == name {
                current = Some(t.clone());
            }
        });
        let current = current.expect("named param");
        let mut f = |flat: &[f64]| {
            let mut perturbed = cell.clone();
            perturbed.visit_params_mut(&mut |n, t| {
                if n == name {
                    *t = crate::tensor::Tensor::new(t.dims(), flat.to_vec()).unwrap();
                }
            });
            lcp_value(&perturbed, &x, &[h.clone()], lambda).map_err(|e| {
                crate::tape::TapeError::Tensor(crate::tensor::TensorError::NonFinite {
                    op: e.to_string(),
                })
            })
        };
        rows.extend(compare_gradient(
            "lcp_double_backward",
            name,
            grad.data(),
            &mut f,
            current.data(),
            DEFAULT_STEP,
            DEFAULT_FLOOR,
        )?);
    }
    Ok(Suite { name: "lcp", tolerance: 1e-5, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_matches_polynomial_derivative() {
        let mut f = |x: &[f64]| Ok(x[0] * x[0] * x[0] + 2.0 * x[1]);
        let g = central_diff(&mut f, &[2.0, 5.0], 1e-5).unwrap();
        assert!(rel_err(g[0], 12.0, 1e-4) < 1e-9);
        assert!(rel_err(g[1], 2.0, 1e-4) < 1e-9);
    }

    #[test]
    fn rel_err_uses_floor_for_tiny_values() {
        assert!(rel_err(0.0, 1e-9, 1e-4) < 1e-4);
        assert!(rel_err(1.0, 2.0, 1e-4) == 0.5);
    }

    #[test]
    fn linear_suite_passes_its_tolerance() {
        let suite = suite_linear().unwrap();
        assert!(!suite.rows.is_empty());
        assert!(suite.passed(), "max rel err {}", suite.max_rel_err());
    }

    #[test]
    fn hgru_suite_passes_its_tolerance() {
        let suite = suite_hgru().unwrap();
        assert!(suite.passed(), "max rel err {}", suite.max_rel_err());
    }

    #[test]
    fn lcp_suite_passes_its_tolerance() {
        let suite = suite_lcp().unwrap();
        assert!(suite.passed(), "max rel err {}", suite.max_rel_err());
    }
}
