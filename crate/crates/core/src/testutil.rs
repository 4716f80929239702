//! Independent numerical oracles shared by unit tests.

use nalgebra::{DMatrix, SymmetricEigen};

/// Gauss–Hermite nodes and weights for `∫ e^{−x²} f(x) dx` by the
/// Golub–Welsch eigenvalue method.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::zeros(n, n);
    for i in 1..n {
        let off = (i as f64 / 2.0).sqrt();
        j[(i, i - 1)] = off;
        j[(i - 1, i)] = off;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

#[test]
fn gauss_hermite_moments() {
    let (x, w) = gauss_hermite(64);
    let m = |p: i32| x.iter().zip(&w).map(|(a, b)| b * a.powi(p)).sum::<f64>() / std::f64::consts::PI.sqrt();
    assert!((m(0) - 1.0).abs() < 1e-12);
    assert!((m(2) - 0.5).abs() < 1e-12);
    assert!((m(4) - 0.75).abs() < 1e-11);
}
