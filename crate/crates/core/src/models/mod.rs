//! Deterministic-state base dynamical systems mapping `(θ, U)` to
//! per-step predictive means, and the Gaussian observation likelihood.

pub mod lds;
pub mod pd;
pub mod rnn;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{MtdsError, Result};
use crate::generator::ConstraintSpec;
use crate::numeric::KahanSum;

pub use lds::{lds_simulate, LdsSpec};
pub use pd::{pd_emission_basis, pd_rates_to_discrete, pd_simulate, PdSpec};
pub use rnn::{gru_cell, rnn_cell, GruCell, MtRnnSpec, RnnCell};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Lds,
    Pd,
    MtRnn,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Lds => "lds",
            ModelKind::Pd => "pd",
            ModelKind::MtRnn => "mtrnn",
        }
    }

    pub fn parse(s: &str) -> Option<ModelKind> {
        match s {
            "lds" => Some(ModelKind::Lds),
            "pd" => Some(ModelKind::Pd),
            "mtrnn" => Some(ModelKind::MtRnn),
            _ => None,
        }
    }
}

/// One of the supported base models with its θ layout.
#[derive(Debug, Clone, PartialEq)]
pub enum BaseModel {
    Lds(LdsSpec),
    Pd(PdSpec),
    MtRnn(MtRnnSpec),
}

impl BaseModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            BaseModel::Lds(_) => ModelKind::Lds,
            BaseModel::Pd(_) => ModelKind::Pd,
            BaseModel::MtRnn(_) => ModelKind::MtRnn,
        }
    }

    pub fn n_u(&self) -> usize {
        match self {
            BaseModel::Lds(s) => s.n_u,
            BaseModel::Pd(_) => 1,
            BaseModel::MtRnn(s) => s.n_u,
        }
    }

    pub fn n_y(&self) -> usize {
        match self {
            BaseModel::Lds(s) => s.n_y,
            BaseModel::Pd(s) => s.n_y,
            BaseModel::MtRnn(s) => s.n_y,
        }
    }

    /// Dimension `d` of θ.
    pub fn n_params(&self) -> usize {
        match self {
            BaseModel::Lds(s) => s.n_params(),
            BaseModel::Pd(s) => s.n_params(),
            BaseModel::MtRnn(s) => s.n_params(),
        }
    }

    /// Length of the flat shared (latent-independent) parameter vector.
    pub fn n_shared(&self) -> usize {
        match self {
            BaseModel::MtRnn(s) => s.n_shared(),
            _ => 0,
        }
    }

    pub fn constraints(&self) -> ConstraintSpec {
        match self {
            BaseModel::Pd(s) => s.constraints(),
            _ => ConstraintSpec::identity(self.n_params()),
        }
    }

    /// θ index of the additive output offset of each channel.
    pub fn offset_indices(&self) -> Vec<usize> {
        match self {
            BaseModel::Lds(s) => (0..s.n_y).map(|j| s.d_offset() + j).collect(),
            BaseModel::Pd(s) => (0..s.n_y).map(|j| s.alpha_index(j)).collect(),
            BaseModel::MtRnn(s) => (0..s.n_y).map(|j| s.d_offset() + j).collect(),
        }
    }

    pub fn simulate(&self, shared: &[f64], theta: &[f64], u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if shared.len() != self.n_shared() {
            return Err(MtdsError::dim("shared parameters", self.n_shared(), shared.len()));
        }
        match self {
            BaseModel::Lds(s) => s.simulate(theta, u),
            BaseModel::Pd(s) => s.simulate(theta, u),
            BaseModel::MtRnn(s) => s.simulate(shared, theta, u),
        }
    }

    /// A valid starting θ with the given per-channel output levels.
    pub fn default_theta(&self, offsets: &[f64]) -> DVector<f64> {
        match self {
            BaseModel::Lds(s) => s.default_theta(offsets),
            BaseModel::Pd(s) => s.default_theta(offsets),
            BaseModel::MtRnn(s) => s.default_theta(offsets),
        }
    }

    pub fn init_shared<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            BaseModel::MtRnn(s) => s.init_shared(rng),
            _ => Vec::new(),
        }
    }
}

/// Per-channel observation precision `ν_j > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePrecision {
    pub nu: DVector<f64>,
}

impl NoisePrecision {
    pub fn new(nu: DVector<f64>) -> Result<Self> {
        if nu.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(MtdsError::invalid("nu", "precisions must be positive and finite"));
        }
        Ok(NoisePrecision { nu })
    }

    pub fn from_log(log_nu: &DVector<f64>) -> Result<Self> {
        Self::new(log_nu.map(f64::exp))
    }

    pub fn uniform(n_y: usize, nu: f64) -> Result<Self> {
        Self::new(DVector::from_element(n_y, nu))
    }

    pub fn len(&self) -> usize {
        self.nu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nu.is_empty()
    }

    pub fn log(&self) -> DVector<f64> {
        self.nu.map(f64::ln)
    }

    pub fn std(&self) -> DVector<f64> {
        self.nu.map(|v| 1.0 / v.sqrt())
    }
}

/// `Σ_{mask} ½ ln(ν_j / 2π) − ½ ν_j (y_tj − ŷ_tj)²`, compensated summation
/// in (t, j) order.
pub fn gaussian_loglik(yhat: &DMatrix<f64>, y: &DMatrix<f64>, mask: &DMatrix<bool>, nu: &NoisePrecision) -> f64 {
    debug_assert_eq!(yhat.shape(), y.shape());
    let norm: Vec<f64> = nu
        .nu
        .iter()
        .map(|&v| 0.5 * (v / (2.0 * std::f64::consts::PI)).ln())
        .collect();
    let mut acc = KahanSum::new();
    for t in 0..y.nrows() {
        for j in 0..y.ncols() {
            if mask[(t, j)] {
                let r = y[(t, j)] - yhat[(t, j)];
                acc.add(norm[j] - 0.5 * nu.nu[j] * r * r);
            }
        }
    }
    acc.total()
}

/// Shape-checked [`gaussian_loglik`].
pub fn gaussian_loglik_checked(
    yhat: &DMatrix<f64>,
    y: &DMatrix<f64>,
    mask: &DMatrix<bool>,
    nu: &NoisePrecision,
) -> Result<f64> {
    if yhat.shape() != y.shape() {
        return Err(MtdsError::dim("predictions rows", y.nrows(), yhat.nrows()));
    }
    if mask.shape() != y.shape() {
        return Err(MtdsError::dim("mask rows", y.nrows(), mask.nrows()));
    }
    if nu.len() != y.ncols() {
        return Err(MtdsError::dim("nu", y.ncols(), nu.len()));
    }
    Ok(gaussian_loglik(yhat, y, mask, nu))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn loglik_examples() {
        let y = DMatrix::from_element(1, 1, 0.4);
        let m = DMatrix::from_element(1, 1, true);
        let nu = NoisePrecision::uniform(1, 1.0).unwrap();
        let v = gaussian_loglik(&y, &y, &m, &nu);
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-15);

        let none = DMatrix::from_element(1, 1, false);
        assert_eq!(gaussian_loglik(&y, &DMatrix::from_element(1, 1, 9.0), &none, &nu), 0.0);

        let y = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let m = DMatrix::from_element(1, 2, true);
        let nu = NoisePrecision::new(DVector::from_vec(vec![1.0, 0.25])).unwrap();
        let v = gaussian_loglik(&DMatrix::zeros(1, 2), &y, &m, &nu);
        // closed form at 30 digits
        assert!((v + 3.531_024_246_969_290_8).abs() < 1e-14);
    }

    #[test]
    fn loglik_ignores_masked_values() {
        let mut y = DMatrix::from_element(3, 2, 1.0);
        let mut m = DMatrix::from_element(3, 2, true);
        m[(1, 1)] = false;
        let nu = NoisePrecision::uniform(2, 2.0).unwrap();
        let a = gaussian_loglik(&DMatrix::zeros(3, 2), &y, &m, &nu);
        y[(1, 1)] = f64::NAN;
        let b = gaussian_loglik(&DMatrix::zeros(3, 2), &y, &m, &nu);
        assert_eq!(a, b);
    }

    #[test]
    fn loglik_is_order_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (t, n) = (400, 3);
        let y = DMatrix::from_fn(t, n, |_, _| rng.random_range(-50.0..50.0));
        let yhat = DMatrix::from_fn(t, n, |_, _| rng.random_range(-50.0..50.0));
        let m = DMatrix::from_fn(t, n, |_, _| rng.random_bool(0.8));
        let nu = NoisePrecision::new(DVector::from_vec(vec![0.3, 5.0, 120.0])).unwrap();
        let base = gaussian_loglik(&yhat, &y, &m, &nu);
        let mut idx: Vec<(usize, usize)> = (0..t).flat_map(|a| (0..n).map(move |b| (a, b))).collect();
        for _ in 0..5 {
            idx.shuffle(&mut rng);
            let mut acc = KahanSum::new();
            for &(a, b) in &idx {
                if m[(a, b)] {
                    let r = y[(a, b)] - yhat[(a, b)];
                    acc.add(0.5 * (nu.nu[b] / (2.0 * std::f64::consts::PI)).ln() - 0.5 * nu.nu[b] * r * r);
                }
            }
            assert!((acc.total() - base).abs() < 1e-9);
        }
    }

    #[test]
    fn noise_precision_validation() {
        assert!(NoisePrecision::new(DVector::from_vec(vec![1.0, 0.0])).is_err());
        assert!(NoisePrecision::new(DVector::from_vec(vec![-1.0])).is_err());
        let p = NoisePrecision::from_log(&DVector::from_vec(vec![0.0, 2f64.ln()])).unwrap();
        assert_eq!(p.nu[0], 1.0);
        assert!((p.nu[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn checked_loglik_rejects_bad_shapes() {
        let nu = NoisePrecision::uniform(2, 1.0).unwrap();
        let y = DMatrix::zeros(2, 2);
        let m = DMatrix::from_element(2, 2, true);
        assert!(gaussian_loglik_checked(&DMatrix::zeros(3, 2), &y, &m, &nu).is_err());
        assert!(gaussian_loglik_checked(&y, &y, &m, &NoisePrecision::uniform(1, 1.0).unwrap()).is_err());
        assert!(gaussian_loglik_checked(&y, &y, &m, &nu).is_ok());
    }
}
