//! Deterministic-state linear dynamical system with an unconditionally
//! stable block-diagonal transition matrix.
//!
//! θ layout (row-major matrices):
//!
//! | block            | length      |
//! |------------------|-------------|
//! | raw dynamics     | `n_x`       |
//! | `B` (n_x × n_u)  | `n_x·n_u`   |
//! | `C` (n_y × n_x)  | `n_y·n_x`   |
//! | `d` (n_y)        | `n_y`       |
//!
//! The raw dynamics hold `(radius_raw, ω)` for each 2×2 rotation block,
//! followed by one tanh-damped scalar when `n_x` is odd. A block realizes
//! `r·[[cos ω, −sin ω], [sin ω, cos ω]]` with `r = (1 − 1e−6)·σ(radius_raw)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{MtdsError, Result};
use crate::numeric::sigmoid;

/// Cap on the spectral radius of every transition block.
pub const RADIUS_CAP: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LdsSpec {
    pub n_x: usize,
    pub n_u: usize,
    pub n_y: usize,
}

/// Realized LDS matrices for one θ.
#[derive(Debug, Clone)]
pub struct LdsMatrices {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
}

impl LdsSpec {
    pub fn new(n_x: usize, n_u: usize, n_y: usize) -> Result<Self> {
        if n_x == 0 || n_y == 0 {
            return Err(MtdsError::invalid("lds", "n_x and n_y must be positive"));
        }
        Ok(LdsSpec { n_x, n_u, n_y })
    }

    pub fn n_params(&self) -> usize {
        self.n_x + self.n_x * self.n_u + self.n_y * self.n_x + self.n_y
    }

    pub fn b_offset(&self) -> usize {
        self.n_x
    }

    pub fn c_offset(&self) -> usize {
        self.b_offset() + self.n_x * self.n_u
    }

    pub fn d_offset(&self) -> usize {
        self.c_offset() + self.n_y * self.n_x
    }

    pub fn n_blocks(&self) -> usize {
        self.n_x / 2
    }

    /// Transition matrix realized from the raw dynamics parameters.
    pub fn transition(&self, raw: &[f64]) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n_x, self.n_x);
        for blk in 0..self.n_blocks() {
            let r = RADIUS_CAP * sigmoid(raw[2 * blk]);
            let (sin, cos) = raw[2 * blk + 1].sin_cos();
            let i = 2 * blk;
            a[(i, i)] = r * cos;
            a[(i, i + 1)] = -r * sin;
            a[(i + 1, i)] = r * sin;
            a[(i + 1, i + 1)] = r * cos;
        }
        if self.n_x % 2 == 1 {
            let i = self.n_x - 1;
            a[(i, i)] = RADIUS_CAP * raw[i].tanh();
        }
        a
    }

    pub fn unpack(&self, theta: &[f64]) -> Result<LdsMatrices> {
        if theta.len() != self.n_params() {
            return Err(MtdsError::dim("LDS theta", self.n_params(), theta.len()));
        }
        let a = self.transition(&theta[..self.n_x]);
        let b = DMatrix::from_row_slice(self.n_x, self.n_u, &theta[self.b_offset()..self.c_offset()]);
        let c = DMatrix::from_row_slice(self.n_y, self.n_x, &theta[self.c_offset()..self.d_offset()]);
        let d = DVector::from_column_slice(&theta[self.d_offset()..]);
        Ok(LdsMatrices { a, b, c, d })
    }

    /// Runs the recursion and returns the states `x_0..x_T` as columns of
    /// an `n_x × (T+1)` matrix together with `Ŷ` (T × n_y).
    pub fn simulate_states(&self, theta: &[f64], u: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if u.ncols() != self.n_u {
            return Err(MtdsError::dim("LDS input columns", self.n_u, u.ncols()));
        }
        let m = self.unpack(theta)?;
        let t_len = u.nrows();
        let ut = u.transpose();
        let mut states = DMatrix::zeros(self.n_x, t_len + 1);
        let mut yhat = DMatrix::zeros(t_len, self.n_y);
        let mut x = DVector::zeros(self.n_x);
        let mut next = DVector::zeros(self.n_x);
        let mut y = DVector::zeros(self.n_y);
        for t in 0..t_len {
            next.gemv(1.0, &m.a, &x, 0.0);
            next.gemv(1.0, &m.b, &ut.column(t), 1.0);
            std::mem::swap(&mut x, &mut next);
            states.set_column(t + 1, &x);
            y.copy_from(&m.d);
            y.gemv(1.0, &m.c, &x, 1.0);
            yhat.set_row(t, &y.transpose());
        }
        Ok((states, yhat))
    }

    /// `x_t = A x_{t−1} + B u_t`, `ŷ_t = C x_t + d`, `x_0 = 0`.
    pub fn simulate(&self, theta: &[f64], u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.simulate_states(theta, u)?.1)
    }

    /// Deterministic starting point: moderately damped rotations at spread
    /// frequencies, alternating-sign input/output loadings and the given
    /// output offsets.
    pub fn default_theta(&self, offsets: &[f64]) -> DVector<f64> {
        let mut th = DVector::zeros(self.n_params());
        for blk in 0..self.n_blocks() {
            th[2 * blk] = 1.5;
            th[2 * blk + 1] = 0.2 + 0.4 * blk as f64;
        }
        if self.n_x % 2 == 1 {
            th[self.n_x - 1] = 0.5;
        }
        for i in 0..self.n_x * self.n_u {
            th[self.b_offset() + i] = if i % 2 == 0 { 0.5 } else { -0.3 };
        }
        for i in 0..self.n_y * self.n_x {
            th[self.c_offset() + i] = if i % 3 == 0 { 0.5 } else { 0.25 };
        }
        for j in 0..self.n_y {
            th[self.d_offset() + j] = offsets.get(j).copied().unwrap_or(0.0);
        }
        th
    }
}

/// Free-function form of [`LdsSpec::simulate`].
pub fn lds_simulate(spec: &LdsSpec, theta: &[f64], u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spec.simulate(theta, u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Complex;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_dynamics_identity_io_passes_input_through() {
        let spec = LdsSpec::new(2, 2, 2).unwrap();
        let mut th = vec![0.0; spec.n_params()];
        th[0] = -1000.0; // σ(−1000) = 0 so the block vanishes
        th[spec.b_offset()] = 1.0;
        th[spec.b_offset() + 3] = 1.0;
        th[spec.c_offset()] = 1.0;
        th[spec.c_offset() + 3] = 1.0;
        let u = DMatrix::from_fn(5, 2, |t, j| (t as f64) - 2.0 * j as f64);
        let y = spec.simulate(&th, &u).unwrap();
        assert_eq!(y, u);
    }

    #[test]
    fn zero_input_gives_offset() {
        let spec = LdsSpec::new(3, 1, 2).unwrap();
        let mut th = spec.default_theta(&[1.5, -2.0]);
        th[0] = 3.0;
        let y = spec.simulate(th.as_slice(), &DMatrix::zeros(7, 1)).unwrap();
        for t in 0..7 {
            assert_eq!(y[(t, 0)], 1.5);
            assert_eq!(y[(t, 1)], -2.0);
        }
    }

    #[test]
    fn scalar_geometric_recursion() {
        let spec = LdsSpec::new(1, 1, 1).unwrap();
        let raw = (0.5 / RADIUS_CAP).atanh();
        let th = [raw, 1.0, 1.0, 0.0];
        let u = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let y = spec.simulate(&th, &u).unwrap();
        for (t, e) in [1.0, 0.5, 0.25].iter().enumerate() {
            assert!((y[(t, 0)] - e).abs() < 1e-14);
        }
    }

    #[test]
    fn layout_mismatch_is_an_error() {
        let spec = LdsSpec::new(2, 1, 1).unwrap();
        assert!(spec.simulate(&[0.0; 3], &DMatrix::zeros(2, 1)).is_err());
        assert!(spec
            .simulate(&vec![0.0; spec.n_params()], &DMatrix::zeros(2, 3))
            .is_err());
    }

    #[test]
    fn transition_is_stable_for_any_raw() {
        let spec = LdsSpec::new(5, 1, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let raw: Vec<f64> = (0..5).map(|_| rng.random_range(-50.0..50.0)).collect();
            let a = spec.transition(&raw);
            let rho = a
                .complex_eigenvalues()
                .iter()
                .map(|c: &Complex<f64>| c.norm())
                .fold(0.0, f64::max);
            assert!(rho <= 1.0 - 1e-6 + 1e-12, "rho = {rho}");
        }
    }

    #[test]
    fn bounded_states_over_long_horizon() {
        let spec = LdsSpec::new(4, 1, 1).unwrap();
        let mut th = spec.default_theta(&[0.0]);
        th[0] = 40.0; // radius at the cap
        th[2] = 40.0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = DMatrix::from_fn(10_000, 1, |_, _| rng.random_range(-1.0..1.0));
        let (states, _) = spec.simulate_states(th.as_slice(), &u).unwrap();
        // |x| ≤ ‖B‖ Σ r^t ≤ ‖B‖ T for r ≤ 1 − 1e−6
        let bound = 10_000.0 * 1.0;
        assert!(states.iter().all(|v| v.is_finite() && v.abs() < bound));
    }
}
