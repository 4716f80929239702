//! Diagonal Gaussian variational posteriors over the latent code.

use nalgebra::DVector;

use crate::error::{MtdsError, Result};
use crate::types::LatentCode;

/// `q(z) = N(mu, diag(exp(2 log_s)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalPosterior {
    pub mu: DVector<f64>,
    pub log_s: DVector<f64>,
}

impl VariationalPosterior {
    pub fn new(mu: DVector<f64>, log_s: DVector<f64>) -> Result<Self> {
        if mu.len() != log_s.len() {
            return Err(MtdsError::dim("log_s", mu.len(), log_s.len()));
        }
        if mu.iter().chain(log_s.iter()).any(|v| !v.is_finite()) {
            return Err(MtdsError::invalid("posterior", "non-finite entry"));
        }
        Ok(VariationalPosterior { mu, log_s })
    }

    /// The standard normal prior as a posterior.
    pub fn prior(k: usize) -> Self {
        VariationalPosterior {
            mu: DVector::zeros(k),
            log_s: DVector::zeros(k),
        }
    }

    pub fn k(&self) -> usize {
        self.mu.len()
    }

    pub fn std(&self) -> DVector<f64> {
        self.log_s.map(f64::exp)
    }

    pub fn variance(&self) -> DVector<f64> {
        self.log_s.map(|l| (2.0 * l).exp())
    }

    /// `KL(q ‖ N(0, I)) = ½ Σ (μ² + s² − 1 − ln s²)`.
    pub fn kl_to_standard(&self) -> f64 {
        0.5 * self
            .mu
            .iter()
            .zip(self.log_s.iter())
            // s² − 1 − ln s² as expm1(2l) − 2l keeps precision near l = 0
            .map(|(&m, &l)| m * m + (2.0 * l).exp_m1() - 2.0 * l)
            .sum::<f64>()
    }

    /// Gradient of the KL term with respect to `(mu, log_s)`.
    pub fn kl_grad(&self) -> (DVector<f64>, DVector<f64>) {
        (self.mu.clone(), self.log_s.map(|l| (2.0 * l).exp_m1()))
    }

    /// `z = μ + exp(log_s) ⊙ ε`.
    pub fn reparameterize(&self, eps: &DVector<f64>) -> Result<LatentCode> {
        if eps.len() != self.k() {
            return Err(MtdsError::dim("eps", self.k(), eps.len()));
        }
        Ok(LatentCode(&self.mu + self.std().component_mul(eps)))
    }
}

/// Free-function form of [`VariationalPosterior::kl_to_standard`].
pub fn kl_diag_gaussian_to_standard(q: &VariationalPosterior) -> f64 {
    q.kl_to_standard()
}
