//! State-space analysis and the two-sample Kolmogorov-Smirnov test.
//!
//! Hidden states are pooled to channel vectors by a global spatial average,
//! a PCA is fit on the task-optimized steps `1..=N`, every step `1..=T` is
//! projected, and the per-image Euclidean distance between the step-N and
//! step-T projections summarizes how far the dynamics drift past the
//! training horizon.

use rayon::prelude::*;

use crate::cells::Cell;
use crate::equilibrium::forward_unroll;
use crate::harness::{HarnessError, Result};
use crate::linalg;
use crate::tensor::Tensor;

/// Spatial average per channel: `(B,H,W,C) -> C` values.
pub fn pooled_channels(h: &Tensor) -> Vec<f64> {
    let c = h.dims()[3];
    let pool = (h.len() / c) as f64;
    let mut out = vec![0.0; c];
    for (i, &v) in h.data().iter().enumerate() {
        out[i % c] += v / pool;
    }
    out
}

/// Principal components of a set of vectors, by eigendecomposition of the
/// population covariance.
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-norm components, strongest first.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

/// Fit up to `max_components` components, dropping directions whose
/// eigenvalue is negligible relative to the strongest (rank deficiency).
pub fn fit_pca<'a, I>(vectors: I, max_components: usize) -> Pca
where
    I: IntoIterator<Item = &'a Vec<f64>> + Clone,
{
    let mut count = 0usize;
    let mut mean: Vec<f64> = Vec::new();
    for v in vectors.clone() {
        if mean.is_empty() {
            mean = vec![0.0; v.len()];
        }
        count += 1;
        for (m, x) in mean.iter_mut().zip(v.iter()) {
            *m += x;
        }
    }
    assert!(count > 0, "fit_pca needs at least one vector");
    let c = mean.len();
    for m in mean.iter_mut() {
        *m /= count as f64;
    }
    let mut cov = vec![vec![0.0; c]; c];
    for v in vectors {
        for r in 0..c {
            let dr = v[r] - mean[r];
            for s in 0..c {
                cov[r][s] += dr * (v[s] - mean[s]) / count as f64;
            }
        }
    }
    let (eigenvalues, eigenvectors) = linalg::symmetric_eigen(&cov);
    let scale = eigenvalues[0].abs().max(1e-30);
    let keep = eigenvalues
        .iter()
        .take(max_components.min(c))
        .filter(|&&v| v > 1e-12 * scale)
        .count()
        .max(1);
    Pca {
        mean,
        components: eigenvectors.into_iter().take(keep).collect(),
        eigenvalues,
    }
}

impl Pca {
    pub fn rank(&self) -> usize {
        self.components.len()
    }

    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|comp| {
                v.iter()
                    .zip(comp.iter())
                    .zip(self.mean.iter())
                    .map(|((x, e), m)| (x - m) * e)
                    .sum()
            })
            .collect()
    }

    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (k, comp) in self.components.iter().enumerate() {
            for (o, e) in out.iter_mut().zip(comp.iter()) {
                *o += coords[k] * e;
            }
        }
        out
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Copy, Debug)]
pub struct ProjectedState {
    pub image: usize,
    pub step: usize,
    pub pc1: f64,
    pub pc2: f64,
}

pub struct StateSpaceOutput {
    pub projections: Vec<ProjectedState>,
    /// Per-image Euclidean distance between the step-N and step-T
    /// projections.
    pub distances: Vec<f64>,
    pub components_used: usize,
    /// Set when the pooled covariance was rank-deficient and fewer than two
    /// components carry variance.
    pub rank_warning: bool,
}

/// Fit a PCA on steps `1..=n` pooled over all drives, project steps
/// `1..=t`, and measure each image's drift between steps `n` and `t`.
pub fn state_space_analysis(
    cell: &(dyn Cell + Sync),
    drives: &[Tensor],
    n: usize,
    t: usize,
) -> Result<StateSpaceOutput> {
    if drives.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    if n < 1 || t < n {
        return Err(HarnessError::InvalidConfig(format!(
            "analysis requires 1 <= N <= T, got N={n}, T={t}"
        )));
    }
    // Pooled state per (image, step).
    let pooled: Vec<Result<Vec<Vec<f64>>>> = drives
        .par_iter()
        .map(|x| {
            let h0 = cell.zero_state(x.dims());
            let run = forward_unroll(cell, x, &h0, t, true, None)?;
            let traj = run.trajectory.expect("retained");
            Ok((1..=t).map(|s| pooled_channels(&traj[s][0])).collect())
        })
        .collect();
    let pooled: Vec<Vec<Vec<f64>>> = pooled.into_iter().collect::<Result<_>>()?;

    let fit: Vec<&Vec<f64>> = pooled.iter().flat_map(|per| per[..n].iter()).collect();
    let pca = fit_pca(fit.into_iter(), 2);
    let rank_warning = pca.rank() < 2;
    if rank_warning {
        log::warn!(
            "state-space covariance is rank-deficient; projecting onto {} component(s)",
            pca.rank()
        );
    }

    let mut projections = Vec::with_capacity(drives.len() * t);
    let mut distances = Vec::with_capacity(drives.len());
    for (image, per_step) in pooled.iter().enumerate() {
        let mut at_n = Vec::new();
        let mut at_t = Vec::new();
        for (idx, v) in per_step.iter().enumerate() {
            let step = idx + 1;
            let coords = pca.project(v);
            if step == n {
                at_n = coords.clone();
            }
            if step == t {
                at_t = coords.clone();
            }
            projections.push(ProjectedState {
                image,
                step,
                pc1: coords[0],
                pc2: coords.get(1).copied().unwrap_or(0.0),
            });
        }
        distances.push(euclid(&at_n, &at_t));
    }

    Ok(StateSpaceOutput {
        projections,
        distances,
        components_used: pca.rank(),
        rank_warning,
    })
}

/// Scatter plot of the projected states: steps up to `n` in red, later
/// steps in blue, on a white canvas with a thin frame.
pub fn write_scatter_png(
    path: &std::path::Path,
    out: &StateSpaceOutput,
    n: usize,
) -> Result<()> {
    const SIZE: usize = 640;
    const PAD: f64 = 0.06;
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &out.projections {
        min_x = min_x.min(p.pc1);
        max_x = max_x.max(p.pc1);
        min_y = min_y.min(p.pc2);
        max_y = max_y.max(p.pc2);
    }
    let span_x = (max_x - min_x).max(1e-12);
    let span_y = (max_y - min_y).max(1e-12);
    let mut rgb = vec![255u8; SIZE * SIZE * 3];
    for i in 0..SIZE {
        for (x, y) in [(i, 0), (i, SIZE - 1), (0, i), (SIZE - 1, i)] {
            let at = (y * SIZE + x) * 3;
            rgb[at..at + 3].copy_from_slice(&[180, 180, 180]);
        }
    }
    let mut mark = |px: f64, py: f64, color: [u8; 3]| {
        let fx = (px - min_x) / span_x * (1.0 - 2.0 * PAD) + PAD;
        let fy = 1.0 - ((py - min_y) / span_y * (1.0 - 2.0 * PAD) + PAD);
        let (cx, cy) = ((fx * SIZE as f64) as i64, (fy * SIZE as f64) as i64);
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (x, y) = (cx + dx, cy + dy);
                if x >= 0 && y >= 0 && (x as usize) < SIZE && (y as usize) < SIZE {
                    let at = (y as usize * SIZE + x as usize) * 3;
                    rgb[at..at + 3].copy_from_slice(&color);
                }
            }
        }
    };
    for p in &out.projections {
        let color = if p.step <= n { [200, 40, 40] } else { [40, 60, 200] };
        mark(p.pc1, p.pc2, color);
    }
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(std::io::BufWriter::new(&mut buf), SIZE as u32, SIZE as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("png header");
        writer.write_image_data(&rgb).expect("png payload");
    }
    crate::tensor::write_atomic(path, &buf)?;
    Ok(())
}

/// Two-sample Kolmogorov-Smirnov test: the supremum ECDF gap `D` and the
/// asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(HarnessError::InvalidConfig(
            "ks_two_sample requires two non-empty samples".into(),
        ));
    }
    let mut xs: Vec<f64> = a.to_vec();
    let mut ys: Vec<f64> = b.to_vec();
    xs.sort_by(|p, q| p.partial_cmp(q).expect("finite samples"));
    ys.sort_by(|p, q| p.partial_cmp(q).expect("finite samples"));
    let (na, nb) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < xs.len() && j < ys.len() {
        let v = xs[i].min(ys[j]);
        while i < xs.len() && xs[i] <= v {
            i += 1;
        }
        while j < ys.len() && ys[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    // Once one sample is exhausted its ECDF is pinned at 1 and the gap only
    // shrinks, so the scan above already saw the supremum.

    let ne = na * nb / (na + nb);
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    Ok((d, ks_survival(lambda)))
}

/// Asymptotic Kolmogorov survival function
/// `Q(x) = 2 sum_{j>=1} (-1)^{j-1} exp(-2 j^2 x^2)`.
fn ks_survival(x: f64) -> f64 {
    if x < 1e-8 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=100 {
        let term = (-2.0 * (j as f64) * (j as f64) * x * x).exp();
        sum += sign * term;
        sign = -sign;
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ks_identical_samples_have_zero_statistic() {
        let a = [0.3, 1.2, -0.7, 2.0];
        let (d, p) = ks_two_sample(&a, &a).unwrap();
        assert_eq!(d, 0.0);
        assert!(p > 0.999);
    }

    #[test]
    fn ks_disjoint_supports_have_unit_statistic() {
        let (d, p) = ks_two_sample(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(d, 1.0);
        assert!(p < 0.2);
    }

    #[test]
    fn ks_statistic_matches_brute_force_ecdf_scan() {
        let a = [1.0, 2.0, 3.0];
        let b = [2.0, 3.0, 4.0];
        let (d, _) = ks_two_sample(&a, &b).unwrap();
        // Exhaustive ECDF evaluation on the pooled support.
        let mut brute: f64 = 0.0;
        for v in [1.0, 2.0, 3.0, 4.0] {
            let fa = a.iter().filter(|&&x| x <= v).count() as f64 / 3.0;
            let fb = b.iter().filter(|&&x| x <= v).count() as f64 / 3.0;
            brute = brute.max((fa - fb).abs());
        }
        assert!((brute - 1.0 / 3.0).abs() < 1e-15);
        assert!((d - brute).abs() < 1e-15, "merge-scan {d} vs brute {brute}");
    }

    #[test]
    fn ks_rejects_empty_input() {
        assert!(ks_two_sample(&[], &[1.0]).is_err());
    }

    #[test]
    fn ks_large_shifted_samples_reject_equality() {
        let a: Vec<f64> = (0..200).map(|i| i as f64 * 0.01).collect();
        let b: Vec<f64> = (0..200).map(|i| i as f64 * 0.01 + 1.0).collect();
        let (_, p) = ks_two_sample(&a, &b).unwrap();
        assert!(p < 1e-6);
    }

    #[test]
    fn pca_recovers_a_planted_plane() {
        // Vectors on a known 2-D affine plane in R^6 reconstruct exactly.
        let e1 = [0.5, 0.5, 0.5, 0.5, 0.0, 0.0];
        let e2 = [0.0, 0.0, 0.0, 0.0, std::f64::consts::FRAC_1_SQRT_2, -std::f64::consts::FRAC_1_SQRT_2];
        let mu = [1.0, -2.0, 0.5, 0.0, 3.0, 1.5];
        let vectors: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let a = (i as f64 * 0.7).sin() * 2.0;
                let b = (i as f64 * 1.3).cos() * 0.8;
                (0..6).map(|k| mu[k] + a * e1[k] + b * e2[k]).collect()
            })
            .collect();
        let pca = fit_pca(vectors.iter(), 2);
        assert_eq!(pca.rank(), 2);
        for v in &vectors {
            let rec = pca.reconstruct(&pca.project(v));
            let err = euclid(v, &rec);
            assert!(err <= 1e-8, "reconstruction error {err}");
        }
    }

    #[test]
    fn projected_distances_are_rotation_invariant() {
        // Rotating channel space consistently leaves pairwise projected
        // distances unchanged (up to numerical noise).
        let dim = 5;
        let vectors: Vec<Vec<f64>> = (0..60)
            .map(|i| (0..dim).map(|k| ((i * 7 + k * 3) as f64 * 0.37).sin() * (k as f64 + 0.5)).collect())
            .collect();
        // Deterministic rotation via Givens compositions.
        let mut rot = vec![vec![0.0; dim]; dim];
        for (k, row) in rot.iter_mut().enumerate() {
            row[k] = 1.0;
        }
        let pairs = [(0usize, 1usize, 0.7f64), (1, 3, -1.1), (2, 4, 0.4)];
        for &(p, q, ang) in &pairs {
            let (c, s) = (ang.cos(), ang.sin());
            for row in rot.iter_mut() {
                let (a, b) = (row[p], row[q]);
                row[p] = c * a - s * b;
                row[q] = s * a + c * b;
            }
        }
        let rotate = |v: &Vec<f64>| -> Vec<f64> {
            (0..dim).map(|r| (0..dim).map(|c| rot[c][r] * v[c]).sum()).collect()
        };
        let rotated: Vec<Vec<f64>> = vectors.iter().map(rotate).collect();

        let base = fit_pca(vectors.iter(), 2);
        let rot_pca = fit_pca(rotated.iter(), 2);
        let d0 = euclid(&base.project(&vectors[0]), &base.project(&vectors[17]));
        let d1 = euclid(&rot_pca.project(&rotated[0]), &rot_pca.project(&rotated[17]));
        assert!((d0 - d1).abs() < 1e-9, "{d0} vs {d1}");
    }
}
