//! Kalman filtering for linear-Gaussian state-space models, the
//! steady-state gain, and the deterministic-state system that reproduces
//! the steady-state filter's one-step predictive distribution.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{MtdsError, Result};
use crate::numeric::mvn_logpdf_chol;

/// `x_t = A x_{t−1} + v_t`, `y_t = C x_t + w_t`, `v ~ N(0, R)`, `w ~ N(0, S)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticLds {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub s: DMatrix<f64>,
}

impl StochasticLds {
    pub fn new(a: DMatrix<f64>, c: DMatrix<f64>, r: DMatrix<f64>, s: DMatrix<f64>) -> Result<Self> {
        let n_x = a.nrows();
        if a.ncols() != n_x {
            return Err(MtdsError::dim("A columns", n_x, a.ncols()));
        }
        if c.ncols() != n_x {
            return Err(MtdsError::dim("C columns", n_x, c.ncols()));
        }
        if r.shape() != (n_x, n_x) {
            return Err(MtdsError::dim("R rows", n_x, r.nrows()));
        }
        let n_y = c.nrows();
        if s.shape() != (n_y, n_y) {
            return Err(MtdsError::dim("S rows", n_y, s.nrows()));
        }
        let radius = a.complex_eigenvalues().iter().map(|e| e.norm()).fold(0.0, f64::max);
        if !(radius < 1.0) {
            return Err(MtdsError::invalid(
                "A",
                format!("spectral radius {radius} is not below 1"),
            ));
        }
        let min_r = r.clone().symmetric_eigenvalues().min();
        if min_r < -1e-12 {
            return Err(MtdsError::NotPositiveDefinite {
                context: "state noise R".into(),
            });
        }
        if Cholesky::new(s.clone()).is_none() {
            return Err(MtdsError::NotPositiveDefinite {
                context: "observation noise S".into(),
            });
        }
        Ok(StochasticLds { a, c, r, s })
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }

    /// A random stable model: `A` rescaled to spectral radius in
    /// `[0.5, 0.95]`, random `C`, and `R`, `S` of the form `G Gᵀ + εI`.
    pub fn random_stable<R: Rng + ?Sized>(n_x: usize, n_y: usize, rng: &mut R) -> Self {
        let mut normal = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng));
        let mut a: DMatrix<f64> = normal(n_x, n_x);
        let c = normal(n_y, n_x);
        let g = normal(n_x, n_x) * 0.5;
        let h = normal(n_y, n_y) * 0.5;
        let radius = a.complex_eigenvalues().iter().map(|e| e.norm()).fold(0.0, f64::max);
        let target = rng.random_range(0.5..0.95);
        a *= target / radius.max(1e-12);
        let r = &g * g.transpose() + DMatrix::identity(n_x, n_x) * 0.05;
        let s = &h * h.transpose() + DMatrix::identity(n_y, n_y) * 0.1;
        StochasticLds::new(a, c, r, s).expect("construction is stable and positive definite")
    }

    /// Draws `T` observations starting from `x_0 = 0`.
    pub fn sample<R: Rng + ?Sized>(&self, t_len: usize, rng: &mut R) -> DMatrix<f64> {
        let lr = Cholesky::new(self.r.clone() + DMatrix::identity(self.n_x(), self.n_x()) * 1e-14)
            .expect("R is positive semi-definite")
            .l();
        let ls = Cholesky::new(self.s.clone()).expect("S is positive definite").l();
        let mut x = DVector::zeros(self.n_x());
        let mut y = DMatrix::zeros(t_len, self.n_y());
        for t in 0..t_len {
            let v = DVector::from_fn(self.n_x(), |_, _| StandardNormal.sample(rng));
            let w = DVector::from_fn(self.n_y(), |_, _| StandardNormal.sample(rng));
            x = &self.a * x + &lr * v;
            let obs = &self.c * &x + &ls * w;
            y.row_mut(t).copy_from(&obs.transpose());
        }
        y
    }
}

#[derive(Debug, Clone)]
pub struct KalmanOutput {
    /// Filtered means `m_t`, `t = 1..T`.
    pub means: Vec<DVector<f64>>,
    /// Filtered covariances `P_t`.
    pub covs: Vec<DMatrix<f64>>,
    /// `log N(y_t; C m_t⁻, C P_t⁻ Cᵀ + S)` per step.
    pub pred_logdens: Vec<f64>,
    pub loglik: f64,
}

fn innovation_chol(s: DMatrix<f64>, t: usize) -> Result<Cholesky<f64, Dyn>> {
    let sym = (&s + s.transpose()) * 0.5;
    Cholesky::new(sym).ok_or(MtdsError::Innovation { t })
}

/// Exact predict/update recursion from `(m0, P0)`.
pub fn kalman_filter(
    model: &StochasticLds,
    y: &DMatrix<f64>,
    m0: &DVector<f64>,
    p0: &DMatrix<f64>,
) -> Result<KalmanOutput> {
    let (n_x, n_y) = (model.n_x(), model.n_y());
    if y.ncols() != n_y {
        return Err(MtdsError::dim("Y columns", n_y, y.ncols()));
    }
    if m0.len() != n_x {
        return Err(MtdsError::dim("m0", n_x, m0.len()));
    }
    if p0.shape() != (n_x, n_x) {
        return Err(MtdsError::dim("P0 rows", n_x, p0.nrows()));
    }
    let t_len = y.nrows();
    let mut out = KalmanOutput {
        means: Vec::with_capacity(t_len),
        covs: Vec::with_capacity(t_len),
        pred_logdens: Vec::with_capacity(t_len),
        loglik: 0.0,
    };
    let mut m = m0.clone();
    let mut p = p0.clone();
    let a_t = model.a.transpose();
    let c_t = model.c.transpose();
    for t in 0..t_len {
        let m_pred = &model.a * &m;
        let p_pred = &model.a * &p * &a_t + &model.r;
        let chol = innovation_chol(&model.c * &p_pred * &c_t + &model.s, t)?;
        let resid = y.row(t).transpose() - &model.c * &m_pred;
        let ld = mvn_logpdf_chol(&resid, &chol.l());
        // K = P⁻ Cᵀ S_t⁻¹ via the factorization, transposed solve
        let gain = chol.solve(&(&model.c * &p_pred)).transpose();
        m = &m_pred + &gain * &resid;
        p = &p_pred - &gain * &model.c * &p_pred;
        p = (&p + p.transpose()) * 0.5;
        out.loglik += ld;
        out.pred_logdens.push(ld);
        out.means.push(m.clone());
        out.covs.push(p.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState {
    /// Fixed point of the predictive covariance.
    pub p_minus: DMatrix<f64>,
    /// Steady-state gain.
    pub k: DMatrix<f64>,
    /// Filtered covariance at the fixed point.
    pub p: DMatrix<f64>,
    pub iters: usize,
}

pub const RICCATI_TOL: f64 = 1e-12;
pub const RICCATI_MAX_ITERS: usize = 100_000;

/// Filtered covariance and gain from a predictive covariance.
fn riccati_update(model: &StochasticLds, p_pred: &DMatrix<f64>, step: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let chol = innovation_chol(&model.c * p_pred * model.c.transpose() + &model.s, step)?;
    let gain = chol.solve(&(&model.c * p_pred)).transpose();
    let p = p_pred - &gain * &model.c * p_pred;
    Ok(((&p + p.transpose()) * 0.5, gain))
}

/// Predictive covariances of the Riccati iteration from `P_0 = 0`:
/// `P⁻_1 = R, P⁻_2, …` (at most `n` of them).
pub fn riccati_iterates(model: &StochasticLds, n: usize) -> Result<Vec<DMatrix<f64>>> {
    let mut out = Vec::with_capacity(n);
    let mut p_pred = model.r.clone();
    for i in 0..n {
        out.push(p_pred.clone());
        let (p, _) = riccati_update(model, &p_pred, i)?;
        p_pred = &model.a * p * model.a.transpose() + &model.r;
    }
    Ok(out)
}

/// Iterates the Riccati map from `P_0 = 0` until successive predictive
/// covariances differ by less than `tol` in max-norm.
pub fn steady_state(model: &StochasticLds, tol: f64, max_iters: usize) -> Result<SteadyState> {
    let mut p_pred = model.r.clone();
    let mut residual = f64::INFINITY;
    for iter in 1..=max_iters {
        let (p, _) = riccati_update(model, &p_pred, iter)?;
        let next = &model.a * &p * model.a.transpose() + &model.r;
        residual = (&next - &p_pred).amax();
        p_pred = next;
        if residual < tol {
            let (p, k) = riccati_update(model, &p_pred, iter)?;
            return Ok(SteadyState {
                p_minus: p_pred,
                k,
                p,
                iters: iter,
            });
        }
    }
    Err(MtdsError::NoConvergence {
        iters: max_iters,
        residual,
    })
}

/// `m_t = A_d m_{t−1} + K y_t` with emission `C A m_t` and constant
/// one-step predictive covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicLds {
    /// `A − K C A`.
    pub a_d: DMatrix<f64>,
    /// Input matrix `K`.
    pub k: DMatrix<f64>,
    /// `C A`, mapping `m_t` to the mean of `y_{t+1}`.
    pub emission: DMatrix<f64>,
    /// `C (A P Aᵀ + R) Cᵀ + S`.
    pub sigma_pred: DMatrix<f64>,
}

impl DeterministicLds {
    pub fn step(&self, m: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        &self.a_d * m + &self.k * y
    }

    pub fn predict(&self, m: &DVector<f64>) -> DVector<f64> {
        &self.emission * m
    }

    /// Runs the recursion over `Y` from `m0`, returning the means and the
    /// predictive log-density of each `y_t` given `m_{t−1}`.
    pub fn run(&self, y: &DMatrix<f64>, m0: &DVector<f64>) -> Result<(Vec<DVector<f64>>, Vec<f64>)> {
        let chol = innovation_chol(self.sigma_pred.clone(), 0)?;
        let l = chol.l();
        let mut m = m0.clone();
        let mut means = Vec::with_capacity(y.nrows());
        let mut lds = Vec::with_capacity(y.nrows());
        for t in 0..y.nrows() {
            let obs = y.row(t).transpose();
            lds.push(mvn_logpdf_chol(&(&obs - self.predict(&m)), &l));
            m = self.step(&m, &obs);
            means.push(m.clone());
        }
        Ok((means, lds))
    }
}

/// The deterministic-state system equivalent to the steady-state filter.
pub fn to_deterministic_lds(model: &StochasticLds, ss: &SteadyState) -> DeterministicLds {
    let ca = &model.c * &model.a;
    DeterministicLds {
        a_d: &model.a - &ss.k * &ca,
        k: ss.k.clone(),
        sigma_pred: &model.c * (&model.a * &ss.p * model.a.transpose() + &model.r) * model.c.transpose() + &model.s,
        emission: ca,
    }
}

/// Largest per-step predictive log-density gap between the exact filter
/// (from `P0 = 0`) and the deterministic construction, after the filtered
/// covariance has converged to within `conv_tol`. The deterministic system
/// is started from the filter's mean at the convergence step. Returns
/// `(gap, convergence step)`.
pub fn equivalence_gap(model: &StochasticLds, y: &DMatrix<f64>, conv_tol: f64) -> Result<(f64, usize)> {
    let ss = steady_state(model, RICCATI_TOL, RICCATI_MAX_ITERS)?;
    let n_x = model.n_x();
    let kf = kalman_filter(model, y, &DVector::zeros(n_x), &DMatrix::zeros(n_x, n_x))?;
    let t_conv = kf
        .covs
        .iter()
        .position(|p| (p - &ss.p).amax() < conv_tol)
        .ok_or(MtdsError::NoConvergence {
            iters: y.nrows(),
            residual: (kf.covs.last().map(|p| (p - &ss.p).amax())).unwrap_or(f64::INFINITY),
        })?;
    let det = to_deterministic_lds(model, &ss);
    let tail = y.rows(t_conv + 1, y.nrows() - t_conv - 1).into_owned();
    let (_, lds) = det.run(&tail, &kf.means[t_conv])?;
    let gap = lds
        .iter()
        .zip(&kf.pred_logdens[t_conv + 1..])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok((gap, t_conv))
}
