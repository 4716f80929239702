//! Recurrent cells and the two-layer multi-task RNN.
//!
//! The first layer is a GRU shared by every sequence. It feeds the second
//! layer through an `ℓ`-unit linear bottleneck `H`. The second layer is a
//! plain tanh RNN whose transition/input weights and output map depend on
//! the latent code, while its bias is shared:
//!
//! ```text
//! x1_t = GRU(x1_{t−1}, u_t; ψ1)
//! x2_t = tanh(A2 x2_{t−1} + B2 H x1_{t−1} + b2)
//! ŷ_t  = C x2_t + d
//! ```
//!
//! Shared layout: `[A_r, A_s, A_x (n1×n1), B_r, B_s, B_x (n1×n_u), b_r, b_s, b_x (n1), H (ℓ×n1), b2 (n2)]`.
//! θ layout: `[A2 (n2×n2), B2 (n2×ℓ), C (n_y×n2), d (n_y)]`. All row-major.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{MtdsError, Result};
use crate::numeric::sigmoid;

/// `tanh(A x + B u + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnCell {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl RnnCell {
    pub fn n(&self) -> usize {
        self.bias.len()
    }

    fn check(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        let n = self.n();
        if self.a.shape() != (n, n) {
            return Err(MtdsError::dim("RNN transition rows", n, self.a.nrows()));
        }
        if x.len() != n {
            return Err(MtdsError::dim("RNN state", n, x.len()));
        }
        if self.b.nrows() != n || self.b.ncols() != u.len() {
            return Err(MtdsError::dim("RNN input", self.b.ncols(), u.len()));
        }
        Ok(())
    }

    /// Pre-activation `A x + B u + b`.
    pub fn pre(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut p = self.bias.clone();
        p.gemv(1.0, &self.a, x, 1.0);
        p.gemv(1.0, &self.b, u, 1.0);
        p
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(x, u)?;
        Ok(self.pre(x, u).map(f64::tanh))
    }
}

/// Gated recurrent unit:
///
/// ```text
/// g_s = σ(A_s x + B_s u + b_s)        update gate
/// g_r = σ(A_r x + B_r u + b_r)        reset gate
/// x̂   = tanh(A_x (g_r ⊙ x) + B_x u + b_x)
/// x'  = (1 − g_s) ⊙ x + g_s ⊙ x̂
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub a_r: DMatrix<f64>,
    pub a_s: DMatrix<f64>,
    pub a_x: DMatrix<f64>,
    pub b_r: DMatrix<f64>,
    pub b_s: DMatrix<f64>,
    pub b_x: DMatrix<f64>,
    pub bias_r: DVector<f64>,
    pub bias_s: DVector<f64>,
    pub bias_x: DVector<f64>,
}

/// Intermediate values of one GRU step, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GruTrace {
    pub g_r: DVector<f64>,
    pub g_s: DVector<f64>,
    pub x_hat: DVector<f64>,
    pub out: DVector<f64>,
}

impl GruCell {
    pub fn zeros(n: usize, m: usize) -> Self {
        GruCell {
            a_r: DMatrix::zeros(n, n),
            a_s: DMatrix::zeros(n, n),
            a_x: DMatrix::zeros(n, n),
            b_r: DMatrix::zeros(n, m),
            b_s: DMatrix::zeros(n, m),
            b_x: DMatrix::zeros(n, m),
            bias_r: DVector::zeros(n),
            bias_s: DVector::zeros(n),
            bias_x: DVector::zeros(n),
        }
    }

    pub fn n(&self) -> usize {
        self.bias_s.len()
    }

    pub fn n_inputs(&self) -> usize {
        self.b_s.ncols()
    }

    /// Number of scalars in the flat layout.
    pub fn n_params(n: usize, m: usize) -> usize {
        3 * n * n + 3 * n * m + 3 * n
    }

    pub fn from_flat(n: usize, m: usize, p: &[f64]) -> Result<Self> {
        if p.len() != Self::n_params(n, m) {
            return Err(MtdsError::dim("GRU parameters", Self::n_params(n, m), p.len()));
        }
        let mut off = 0;
        let mut mat = |r: usize, c: usize| {
            let out = DMatrix::from_row_slice(r, c, &p[off..off + r * c]);
            off += r * c;
            out
        };
        let a_r = mat(n, n);
        let a_s = mat(n, n);
        let a_x = mat(n, n);
        let b_r = mat(n, m);
        let b_s = mat(n, m);
        let b_x = mat(n, m);
        let bias_r = mat(n, 1).column(0).into_owned();
        let bias_s = mat(n, 1).column(0).into_owned();
        let bias_x = mat(n, 1).column(0).into_owned();
        Ok(GruCell {
            a_r,
            a_s,
            a_x,
            b_r,
            b_s,
            b_x,
            bias_r,
            bias_s,
            bias_x,
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::n_params(self.n(), self.n_inputs()));
        for m in [&self.a_r, &self.a_s, &self.a_x, &self.b_r, &self.b_s, &self.b_x] {
            push_row_major(&mut out, m);
        }
        for v in [&self.bias_r, &self.bias_s, &self.bias_x] {
            out.extend(v.iter());
        }
        out
    }

    fn check(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        if x.len() != self.n() {
            return Err(MtdsError::dim("GRU state", self.n(), x.len()));
        }
        if u.len() != self.n_inputs() {
            return Err(MtdsError::dim("GRU input", self.n_inputs(), u.len()));
        }
        Ok(())
    }

    pub fn trace(&self, x: &DVector<f64>, u: &DVector<f64>) -> GruTrace {
        let gate = |a: &DMatrix<f64>, b: &DMatrix<f64>, bias: &DVector<f64>| {
            let mut p = bias.clone();
            p.gemv(1.0, a, x, 1.0);
            p.gemv(1.0, b, u, 1.0);
            p.map(sigmoid)
        };
        let g_s = gate(&self.a_s, &self.b_s, &self.bias_s);
        let g_r = gate(&self.a_r, &self.b_r, &self.bias_r);
        let mut p = self.bias_x.clone();
        p.gemv(1.0, &self.a_x, &g_r.component_mul(x), 1.0);
        p.gemv(1.0, &self.b_x, u, 1.0);
        let x_hat = p.map(f64::tanh);
        let out = x + g_s.component_mul(&(&x_hat - x));
        GruTrace { g_r, g_s, x_hat, out }
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(x, u)?;
        Ok(self.trace(x, u).out)
    }
}

pub(crate) fn push_row_major(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
}

/// Free-function form of [`RnnCell::step`].
pub fn rnn_cell(x: &DVector<f64>, u: &DVector<f64>, psi: &RnnCell) -> Result<DVector<f64>> {
    psi.step(x, u)
}

/// Free-function form of [`GruCell::step`].
pub fn gru_cell(x: &DVector<f64>, u: &DVector<f64>, psi: &GruCell) -> Result<DVector<f64>> {
    psi.step(x, u)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MtRnnSpec {
    pub n_u: usize,
    pub n_y: usize,
    /// First-layer GRU width.
    pub n1: usize,
    /// Bottleneck width.
    pub ell: usize,
    /// Second-layer (multi-task) RNN width.
    pub n2: usize,
}

/// Parameters shared by every sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MtRnnShared {
    pub gru: GruCell,
    pub h: DMatrix<f64>,
    pub b2: DVector<f64>,
}

/// Latent-dependent parameters of the second layer and the emission.
#[derive(Debug, Clone, PartialEq)]
pub struct MtRnnTheta {
    pub a2: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
}

/// Every hidden state of a forward pass, `x_0..x_T` as columns.
#[derive(Debug, Clone)]
pub struct MtRnnStates {
    pub x1: DMatrix<f64>,
    pub x2: DMatrix<f64>,
}

impl MtRnnSpec {
    pub fn new(n_u: usize, n_y: usize, n1: usize, ell: usize, n2: usize) -> Result<Self> {
        if [n_y, n1, ell, n2].contains(&0) {
            return Err(MtdsError::invalid("mtrnn", "layer sizes must be positive"));
        }
        Ok(MtRnnSpec { n_u, n_y, n1, ell, n2 })
    }

    /// Desk-scale default widths (32 / 8 / 16).
    pub fn toy(n_u: usize, n_y: usize) -> Self {
        MtRnnSpec {
            n_u,
            n_y,
            n1: 32,
            ell: 8,
            n2: 16,
        }
    }

    pub fn n_params(&self) -> usize {
        self.n2 * self.n2 + self.n2 * self.ell + self.n_y * self.n2 + self.n_y
    }

    pub fn n_shared(&self) -> usize {
        GruCell::n_params(self.n1, self.n_u) + self.ell * self.n1 + self.n2
    }

    pub fn d_offset(&self) -> usize {
        self.n_params() - self.n_y
    }

    pub fn unpack_shared(&self, p: &[f64]) -> Result<MtRnnShared> {
        if p.len() != self.n_shared() {
            return Err(MtdsError::dim("MT-RNN shared", self.n_shared(), p.len()));
        }
        let g = GruCell::n_params(self.n1, self.n_u);
        let gru = GruCell::from_flat(self.n1, self.n_u, &p[..g])?;
        let h = DMatrix::from_row_slice(self.ell, self.n1, &p[g..g + self.ell * self.n1]);
        let b2 = DVector::from_column_slice(&p[g + self.ell * self.n1..]);
        Ok(MtRnnShared { gru, h, b2 })
    }

    pub fn pack_shared(&self, s: &MtRnnShared) -> Vec<f64> {
        let mut out = s.gru.to_flat();
        push_row_major(&mut out, &s.h);
        out.extend(s.b2.iter());
        out
    }

    pub fn unpack_theta(&self, theta: &[f64]) -> Result<MtRnnTheta> {
        if theta.len() != self.n_params() {
            return Err(MtdsError::dim("MT-RNN theta", self.n_params(), theta.len()));
        }
        let (n2, ell, ny) = (self.n2, self.ell, self.n_y);
        let mut off = 0;
        let mut mat = |r: usize, c: usize| {
            let out = DMatrix::from_row_slice(r, c, &theta[off..off + r * c]);
            off += r * c;
            out
        };
        let a2 = mat(n2, n2);
        let b2 = mat(n2, ell);
        let c = mat(ny, n2);
        let d = DVector::from_column_slice(&theta[off..]);
        Ok(MtRnnTheta { a2, b2, c, d })
    }

    pub fn forward(&self, shared: &[f64], theta: &[f64], u: &DMatrix<f64>) -> Result<(MtRnnStates, DMatrix<f64>)> {
        if u.ncols() != self.n_u {
            return Err(MtdsError::dim("MT-RNN input columns", self.n_u, u.ncols()));
        }
        let sh = self.unpack_shared(shared)?;
        let th = self.unpack_theta(theta)?;
        let t_len = u.nrows();
        let ut = u.transpose();
        let mut x1 = DMatrix::zeros(self.n1, t_len + 1);
        let mut x2 = DMatrix::zeros(self.n2, t_len + 1);
        let mut yhat = DMatrix::zeros(t_len, self.n_y);
        // B2·H folded once per call
        let b2h = &th.b2 * &sh.h;
        let mut pre = DVector::zeros(self.n2);
        let mut y = DVector::zeros(self.n_y);
        for t in 0..t_len {
            let prev1 = x1.column(t).into_owned();
            let prev2 = x2.column(t).into_owned();
            let ut_col = ut.column(t).into_owned();
            let next1 = sh.gru.trace(&prev1, &ut_col).out;
            pre.copy_from(&sh.b2);
            pre.gemv(1.0, &th.a2, &prev2, 1.0);
            pre.gemv(1.0, &b2h, &prev1, 1.0);
            let next2 = pre.map(f64::tanh);
            y.copy_from(&th.d);
            y.gemv(1.0, &th.c, &next2, 1.0);
            x1.set_column(t + 1, &next1);
            x2.set_column(t + 1, &next2);
            yhat.set_row(t, &y.transpose());
        }
        Ok((MtRnnStates { x1, x2 }, yhat))
    }

    pub fn simulate(&self, shared: &[f64], theta: &[f64], u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward(shared, theta, u)?.1)
    }

    /// Uniform Glorot-style initialization of the shared parameters.
    pub fn init_shared<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut uni = |fan: usize, len: usize| -> Vec<f64> {
            let lim = (1.0 / fan.max(1) as f64).sqrt();
            let d = Uniform::new_inclusive(-lim, lim).expect("finite bounds");
            (0..len).map(|_| d.sample(rng)).collect()
        };
        let (n1, nu) = (self.n1, self.n_u);
        let mut out = Vec::with_capacity(self.n_shared());
        for _ in 0..3 {
            out.extend(uni(n1, n1 * n1));
        }
        for _ in 0..3 {
            out.extend(uni(nu, n1 * nu));
        }
        out.extend(std::iter::repeat_n(0.0, 3 * n1));
        out.extend(uni(n1, self.ell * n1));
        out.extend(std::iter::repeat_n(0.0, self.n2));
        out
    }

    /// Deterministic small-weight starting θ with the given output offsets.
    pub fn default_theta(&self, offsets: &[f64]) -> DVector<f64> {
        let mut th = DVector::zeros(self.n_params());
        let scale_a = 0.5 / (self.n2 as f64).sqrt();
        let scale_b = 0.5 / (self.ell as f64).sqrt();
        let scale_c = 1.0 / (self.n2 as f64).sqrt();
        let mut i = 0;
        for k in 0..self.n2 * self.n2 {
            th[i] = scale_a * alternating(k);
            i += 1;
        }
        for k in 0..self.n2 * self.ell {
            th[i] = scale_b * alternating(k + 1);
            i += 1;
        }
        for k in 0..self.n_y * self.n2 {
            th[i] = scale_c * alternating(k + 2);
            i += 1;
        }
        for j in 0..self.n_y {
            th[i + j] = offsets.get(j).copied().unwrap_or(0.0);
        }
        th
    }
}

/// Deterministic pseudo-random pattern in [−1, 1].
fn alternating(k: usize) -> f64 {
    ((k as f64 + 1.0) * 0.618_033_988_749_895 * std::f64::consts::TAU).sin()
}
