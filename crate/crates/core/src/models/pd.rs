//! Discrete-time pharmacodynamic model.
//!
//! Each output channel `j` has a first-order effect-site state driven by
//! the scalar central-compartment concentration `u_t`,
//!
//! ```text
//! x_tj = β1_j x_{t−1,j} + β2_j u_t,          x_0 = 0
//! ŷ_tj = g_j(x_tj + β3_j) + α_j,   g_j(x) = Σ_r η_jr σ(a_r (x − b_r))
//! ```
//!
//! θ layout: `[α (n_y), β1 (n_y), β2 (n_y), β3 (n_y), η_1 (L), …, η_{n_y} (L)]`.

use nalgebra::{DMatrix, DVector};

use crate::error::{MtdsError, Result};
use crate::generator::{Constraint, ConstraintSpec};
use crate::numeric::sigmoid;

/// Number of sigmoid basis functions in the standard emission.
pub const BASIS_SIZE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct PdSpec {
    pub n_y: usize,
    /// Basis slopes, all negative.
    pub a: Vec<f64>,
    /// Basis locations.
    pub b: Vec<f64>,
}

/// Borrowed view of one θ vector.
#[derive(Debug, Clone, Copy)]
pub struct PdParams<'a> {
    pub alpha: &'a [f64],
    pub beta1: &'a [f64],
    pub beta2: &'a [f64],
    pub beta3: &'a [f64],
    eta: &'a [f64],
    l: usize,
}

impl<'a> PdParams<'a> {
    pub fn eta(&self, j: usize) -> &'a [f64] {
        &self.eta[j * self.l..(j + 1) * self.l]
    }
}

impl PdSpec {
    /// Standard basis: `a_r = −0.5·2^{r/2}`, `b_r` evenly spaced on `[0, 10]`,
    /// for `r = 1..8`.
    pub fn standard(n_y: usize) -> Self {
        let a = (1..=BASIS_SIZE).map(|r| -0.5 * 2f64.powf(r as f64 / 2.0)).collect();
        let b = (0..BASIS_SIZE)
            .map(|i| 10.0 * i as f64 / (BASIS_SIZE - 1) as f64)
            .collect();
        PdSpec { n_y, a, b }
    }

    pub fn new(n_y: usize, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != b.len() || a.is_empty() {
            return Err(MtdsError::dim("PD basis locations", a.len(), b.len()));
        }
        if a.iter().any(|&v| !(v < 0.0)) {
            return Err(MtdsError::invalid("a", "basis slopes must be negative"));
        }
        if n_y == 0 {
            return Err(MtdsError::invalid("n_y", "must be positive"));
        }
        Ok(PdSpec { n_y, a, b })
    }

    pub fn basis_size(&self) -> usize {
        self.a.len()
    }

    pub fn n_params(&self) -> usize {
        (4 + self.basis_size()) * self.n_y
    }

    pub fn alpha_index(&self, j: usize) -> usize {
        j
    }
    pub fn beta1_index(&self, j: usize) -> usize {
        self.n_y + j
    }
    pub fn beta2_index(&self, j: usize) -> usize {
        2 * self.n_y + j
    }
    pub fn beta3_index(&self, j: usize) -> usize {
        3 * self.n_y + j
    }
    pub fn eta_index(&self, j: usize, r: usize) -> usize {
        4 * self.n_y + j * self.basis_size() + r
    }

    /// Logistic for β1, softplus for β2 and η, identity for α and β3.
    pub fn constraints(&self) -> ConstraintSpec {
        let mut c = vec![Constraint::Identity; self.n_params()];
        for j in 0..self.n_y {
            c[self.beta1_index(j)] = Constraint::Logistic;
            c[self.beta2_index(j)] = Constraint::Softplus;
            for r in 0..self.basis_size() {
                c[self.eta_index(j, r)] = Constraint::Softplus;
            }
        }
        ConstraintSpec(c)
    }

    pub fn params<'a>(&self, theta: &'a [f64]) -> Result<PdParams<'a>> {
        if theta.len() != self.n_params() {
            return Err(MtdsError::dim("PD theta", self.n_params(), theta.len()));
        }
        let n = self.n_y;
        let p = PdParams {
            alpha: &theta[0..n],
            beta1: &theta[n..2 * n],
            beta2: &theta[2 * n..3 * n],
            beta3: &theta[3 * n..4 * n],
            eta: &theta[4 * n..],
            l: self.basis_size(),
        };
        if p.beta1.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(MtdsError::invalid("beta1", "must lie in [0, 1]"));
        }
        if p.beta2.iter().chain(p.eta).any(|&v| !(v >= 0.0)) {
            return Err(MtdsError::invalid("beta2/eta", "must be non-negative"));
        }
        Ok(p)
    }

    /// Emission `g(x)` for one channel (no constraint checks).
    #[inline]
    pub fn emission(&self, x: f64, eta: &[f64]) -> f64 {
        let mut g = 0.0;
        for r in 0..eta.len() {
            g += eta[r] * sigmoid(self.a[r] * (x - self.b[r]));
        }
        g
    }

    /// Effect-site states `x_{1..T}` (T × n_y) and `Ŷ` (T × n_y).
    pub fn simulate_states(&self, theta: &[f64], u: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if u.ncols() != 1 {
            return Err(MtdsError::dim("PD input columns", 1, u.ncols()));
        }
        let p = self.params(theta)?;
        let t_len = u.nrows();
        let mut xs = DMatrix::zeros(t_len, self.n_y);
        let mut yhat = DMatrix::zeros(t_len, self.n_y);
        for j in 0..self.n_y {
            let eta = p.eta(j);
            let mut x = 0.0;
            for t in 0..t_len {
                x = p.beta1[j] * x + p.beta2[j] * u[(t, 0)];
                xs[(t, j)] = x;
                yhat[(t, j)] = self.emission(x + p.beta3[j], eta) + p.alpha[j];
            }
        }
        Ok((xs, yhat))
    }

    pub fn simulate(&self, theta: &[f64], u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.simulate_states(theta, u)?.1)
    }

    /// In-range starting point: slow dynamics near unit gain, small
    /// emission weights, offsets at the given channel levels.
    pub fn default_theta(&self, offsets: &[f64]) -> DVector<f64> {
        let mut th = DVector::zeros(self.n_params());
        for j in 0..self.n_y {
            th[self.alpha_index(j)] = offsets.get(j).copied().unwrap_or(0.0);
            th[self.beta1_index(j)] = 0.8;
            th[self.beta2_index(j)] = 0.2;
            th[self.beta3_index(j)] = 0.0;
            for r in 0..self.basis_size() {
                th[self.eta_index(j, r)] = 0.1;
            }
        }
        th
    }
}

/// Converts PD rate constants (per sampling interval) into the discrete
/// coefficients for a piecewise-constant input:
/// `β1 = e^{−k_e0}`, `β2 = (k_1e/k_e0)(1 − e^{−k_e0})`.
pub fn pd_rates_to_discrete(k_1e: f64, k_e0: f64) -> Result<(f64, f64)> {
    if !(k_1e > 0.0) || !(k_e0 > 0.0) || !k_1e.is_finite() || !k_e0.is_finite() {
        return Err(MtdsError::invalid(
            "rate constants",
            format!("k_1e = {k_1e}, k_e0 = {k_e0} must be positive and finite"),
        ));
    }
    let beta1 = (-k_e0).exp();
    let beta2 = k_1e * (-(-k_e0).exp_m1()) / k_e0;
    Ok((beta1, beta2))
}

/// `g(x) = Σ_r η_r σ(a_r (x − b_r))` with `a_r < 0` and `η_r ≥ 0`.
pub fn pd_emission_basis(x: f64, eta: &[f64], a: &[f64], b: &[f64]) -> Result<f64> {
    if eta.len() != a.len() || a.len() != b.len() {
        return Err(MtdsError::dim("basis size", a.len(), eta.len()));
    }
    if a.iter().any(|&v| !(v < 0.0)) {
        return Err(MtdsError::invalid("a", "basis slopes must be negative"));
    }
    if eta.iter().any(|&v| !(v >= 0.0)) {
        return Err(MtdsError::invalid("eta", "coefficients must be non-negative"));
    }
    Ok(eta
        .iter()
        .zip(a.iter().zip(b))
        .map(|(&e, (&ar, &br))| e * sigmoid(ar * (x - br)))
        .sum())
}

/// Free-function form of [`PdSpec::simulate`] taking the scalar input as a slice.
pub fn pd_simulate(spec: &PdSpec, theta: &[f64], u: &[f64]) -> Result<DMatrix<f64>> {
    spec.simulate(theta, &DMatrix::from_column_slice(u.len(), 1, u))
}
