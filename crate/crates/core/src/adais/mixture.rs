use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{MtdsError, Result};
use crate::numeric::{log_sum_exp, mvn_logpdf_chol};

/// `Σ_j α_j N(μ_j, Σ_j)` with cached Cholesky factors.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
    chols: Vec<DMatrix<f64>>,
}

impl GaussianMixture {
    /// Weights must be non-negative and sum to 1 within 1e−12; they are
    /// renormalized exactly.
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        let j = weights.len();
        if j == 0 {
            return Err(MtdsError::invalid("mixture", "no components"));
        }
        if means.len() != j {
            return Err(MtdsError::dim("mixture means", j, means.len()));
        }
        if covs.len() != j {
            return Err(MtdsError::dim("mixture covariances", j, covs.len()));
        }
        let k = means[0].len();
        if k == 0 {
            return Err(MtdsError::invalid("mixture", "zero-dimensional components"));
        }
        for (m, c) in means.iter().zip(&covs) {
            if m.len() != k {
                return Err(MtdsError::dim("mixture mean", k, m.len()));
            }
            if c.shape() != (k, k) {
                return Err(MtdsError::dim("mixture covariance", k, c.nrows()));
            }
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(MtdsError::invalid("mixture weights", "must lie on the simplex"));
        }
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut chols = Vec::with_capacity(j);
        let mut sym_covs = Vec::with_capacity(j);
        for (i, c) in covs.into_iter().enumerate() {
            let c = (&c + c.transpose()) * 0.5;
            let l = Cholesky::new(c.clone())
                .ok_or_else(|| MtdsError::NotPositiveDefinite {
                    context: format!("mixture component {i}"),
                })?
                .l();
            chols.push(l);
            sym_covs.push(c);
        }
        Ok(GaussianMixture {
            weights,
            means,
            covs: sym_covs,
            chols,
        })
    }

    /// From lower-triangular factors with positive diagonals, kept as
    /// given; covariances are `L Lᵀ`.
    pub fn from_cholesky(weights: Vec<f64>, means: Vec<DVector<f64>>, chols: Vec<DMatrix<f64>>) -> Result<Self> {
        for (i, l) in chols.iter().enumerate() {
            let square = l.is_square();
            let lower = square && (0..l.nrows()).all(|r| (r + 1..l.ncols()).all(|c| l[(r, c)] == 0.0));
            if !lower || l.diagonal().iter().any(|d| !(*d > 0.0 && d.is_finite())) {
                return Err(MtdsError::NotPositiveDefinite {
                    context: format!("Cholesky factor {i}"),
                });
            }
        }
        let covs: Vec<DMatrix<f64>> = chols.iter().map(|l| l * l.transpose()).collect();
        let mut g = Self::new(weights, means, covs)?;
        g.chols = chols;
        Ok(g)
    }

    pub fn single(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![cov])
    }

    /// `N(0, I_k)` as a one-component mixture.
    pub fn standard(k: usize) -> Self {
        Self::single(DVector::zeros(k), DMatrix::identity(k, k)).expect("identity is positive definite")
    }

    pub fn k(&self) -> usize {
        self.means[0].len()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covs(&self) -> &[DMatrix<f64>] {
        &self.covs
    }

    /// Lower Cholesky factor of component `j`.
    pub fn chol(&self, j: usize) -> &DMatrix<f64> {
        &self.chols[j]
    }

    /// Overall mean `Σ α_j μ_j`.
    pub fn mean(&self) -> DVector<f64> {
        self.weights
            .iter()
            .zip(&self.means)
            .fold(DVector::zeros(self.k()), |acc, (w, m)| acc + m * *w)
    }

    /// Overall covariance by the law of total variance.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = self.mean();
        let k = self.k();
        let mut out = DMatrix::zeros(k, k);
        for ((w, m), c) in self.weights.iter().zip(&self.means).zip(&self.covs) {
            let d = m - &mu;
            out += (c + &d * d.transpose()) * *w;
        }
        out
    }

    pub fn component_logpdf(&self, j: usize, z: &DVector<f64>) -> f64 {
        mvn_logpdf_chol(&(z - &self.means[j]), &self.chols[j])
    }

    pub fn logpdf(&self, z: &DVector<f64>) -> f64 {
        let terms: Vec<f64> = (0..self.n_components())
            .map(|j| self.weights[j].ln() + self.component_logpdf(j, z))
            .collect();
        log_sum_exp(&terms)
    }

    /// Draws from the mixture given a uniform `u` for the component and
    /// standard normal `eps` for the Gaussian.
    pub fn transform(&self, u: f64, eps: &DVector<f64>) -> DVector<f64> {
        let j = self.pick(u);
        &self.means[j] + &self.chols[j] * eps
    }

    fn pick(&self, u: f64) -> usize {
        let mut acc = 0.0;
        let mut last = 0;
        for (j, w) in self.weights.iter().enumerate() {
            if *w > 0.0 {
                last = j;
                acc += w;
                if u < acc {
                    return j;
                }
            }
        }
        last
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let u: f64 = rng.random();
        let eps = DVector::from_fn(self.k(), |_, _| rng.sample(StandardNormal));
        self.transform(u, &eps)
    }

    /// Copy with every covariance scaled by `factor`.
    pub fn inflated(&self, factor: f64) -> Self {
        let covs = self.covs.iter().map(|c| c * factor).collect();
        GaussianMixture::new(self.weights.clone(), self.means.clone(), covs).expect("scaling keeps definiteness")
    }
}

/// Clamps the eigenvalues of a symmetric matrix at `floor`. Returns the
/// result and whether any eigenvalue was raised.
pub fn floor_eigenvalues(cov: &DMatrix<f64>, floor: f64) -> (DMatrix<f64>, bool) {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut raised = false;
    let vals = eig.eigenvalues.map(|v| {
        if v < floor {
            raised = true;
            floor
        } else {
            v
        }
    });
    if !raised {
        return ((cov + cov.transpose()) * 0.5, false);
    }
    let q = &eig.eigenvectors;
    let out = q * DMatrix::from_diagonal(&vals) * q.transpose();
    ((&out + out.transpose()) * 0.5, true)
}

/// `1 / Σ w̃²` of normalized weights.
pub fn ess(normalized_weights: &[f64]) -> f64 {
    let s: f64 = normalized_weights.iter().map(|w| w * w).sum();
    1.0 / s
}

/// Particles with log and self-normalized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    pub particles: Vec<DVector<f64>>,
    pub log_weights: Vec<f64>,
    pub normalized_weights: Vec<f64>,
}

impl WeightedSample {
    /// Normalizes by max-shifted exponentiation. `NaN` log-weights count
    /// as `−∞`.
    pub fn from_log_weights(particles: Vec<DVector<f64>>, log_weights: Vec<f64>) -> Result<Self> {
        if particles.len() != log_weights.len() {
            return Err(MtdsError::dim("log weights", particles.len(), log_weights.len()));
        }
        let log_weights: Vec<f64> = log_weights
            .into_iter()
            .map(|l| if l.is_nan() { f64::NEG_INFINITY } else { l })
            .collect();
        let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(MtdsError::NoSupport);
        }
        let raw: Vec<f64> = log_weights.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = raw.iter().sum();
        let normalized_weights = raw.iter().map(|w| w / total).collect();
        Ok(WeightedSample {
            particles,
            log_weights,
            normalized_weights,
        })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn ess(&self) -> f64 {
        ess(&self.normalized_weights)
    }
}
