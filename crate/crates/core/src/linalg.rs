//! Small dense linear algebra used by the diagnostics: solving the
//! implicit-gradient systems of the linear oracles, spectral norms for
//! scaling test matrices, and the symmetric eigendecomposition behind the
//! state-space PCA. All matrices here are tiny (dimension <= channel count),
//! so `nalgebra`'s dense routines are plenty.

use nalgebra::{DMatrix, DVector};

fn to_dmatrix(m: &[Vec<f64>]) -> DMatrix<f64> {
    let rows = m.len();
    let cols = m[0].len();
    DMatrix::from_fn(rows, cols, |r, c| m[r][c])
}

/// Solve `A x = b` by LU with partial pivoting; `None` if singular.
pub fn solve(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let lu = to_dmatrix(a).lu();
    lu.solve(&DVector::from_column_slice(b))
        .map(|x| x.as_slice().to_vec())
}

/// Largest singular value.
pub fn spectral_norm(m: &[Vec<f64>]) -> f64 {
    to_dmatrix(m).singular_values().max()
}

/// Eigenpairs of a symmetric matrix, sorted by descending eigenvalue.
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors as rows.
pub fn symmetric_eigen(m: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = m.len();
    let se = to_dmatrix(m).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| se.eigenvalues[b].partial_cmp(&se.eigenvalues[a]).unwrap());
    let values = order.iter().map(|&i| se.eigenvalues[i]).collect();
    let vectors = order
        .iter()
        .map(|&i| se.eigenvectors.column(i).as_slice().to_vec())
        .collect();
    (values, vectors)
}

/// Random square matrix rescaled to the requested spectral norm.
pub fn random_with_spectral_norm<R: rand::Rng>(
    dim: usize,
    target: f64,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    use rand_distr::StandardNormal;
    let mut m: Vec<Vec<f64>> = (0..dim)
        .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let norm = spectral_norm(&m);
    for row in m.iter_mut() {
        for v in row.iter_mut() {
            *v *= target / norm;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_matches_hand_inverse() {
        let a = vec![vec![2.0, 1.0], vec![1.0, 3.0]];
        let x = solve(&a, &[5.0, 10.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!((x[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn solve_detects_singular() {
        let a = vec![vec![1.0, 2.0], vec![2.0, 4.0]];
        assert!(solve(&a, &[1.0, 2.0]).is_none());
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let m = vec![vec![3.0, 0.0], vec![0.0, -5.0]];
        assert!((spectral_norm(&m) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn rescaling_hits_the_target_norm() {
        let mut rng = rand::SeedableRng::seed_from_u64(3);
        let m = random_with_spectral_norm::<rand_chacha::ChaCha8Rng>(5, 0.7, &mut rng);
        assert!((spectral_norm(&m) - 0.7).abs() < 1e-10);
    }

    #[test]
    fn symmetric_eigen_recovers_planted_spectrum() {
        // Diagonalize Q diag(d) Q^T for a known rotation.
        let c = std::f64::consts::FRAC_1_SQRT_2;
        let q = [[c, -c], [c, c]];
        let d = [4.0, 1.0];
        let mut m = vec![vec![0.0; 2]; 2];
        for r in 0..2 {
            for s in 0..2 {
                m[r][s] = (0..2).map(|k| q[r][k] * d[k] * q[s][k]).sum();
            }
        }
        let (vals, vecs) = symmetric_eigen(&m);
        assert!((vals[0] - 4.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
        // First eigenvector is (c, c) up to sign.
        assert!((vecs[0][0].abs() - c).abs() < 1e-12);
        assert!((vecs[0][1].abs() - c).abs() < 1e-12);
    }
}
