//! Dense covariance eigendecomposition through nalgebra.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_points(seed: u64, m: usize, p: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m)
        .map(|_| (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

pub fn covariance(points: &[Vec<f64>]) -> DMatrix<f64> {
    let (m, p) = (points.len(), points[0].len());
    let x = DMatrix::from_fn(m, p, |i, j| points[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(m, p, |i, j| x[(i, j)] - mean[j]);
    centered.transpose() * &centered / (m as f64 - 1.0)
}

/// Eigenvalues of the sample covariance, descending, with their eigenvectors.
pub fn eigenpairs(points: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let eig = SymmetricEigen::new(covariance(points));
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = order
        .iter()
        .map(|&k| eig.eigenvectors.column(k).iter().copied().collect())
        .collect();
    (values, vectors)
}

pub fn same_up_to_sign(a: &[f64], b: &[f64], tol: f64) -> bool {
    let plus = a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol);
    let minus = a.iter().zip(b).all(|(x, y)| (x + y).abs() <= tol);
    plus || minus
}
