//! Backpropagation through time for the two-layer multi-task RNN.
//!
//! The forward pass keeps hidden states only at checkpoints every
//! `stride` steps. The backward pass walks segments from the end,
//! recomputing each segment's states from its checkpoint.

use nalgebra::{DMatrix, DVector};

use crate::error::{MtdsError, Result};
use crate::models::rnn::{push_row_major, GruCell, MtRnnShared, MtRnnSpec, MtRnnTheta};

/// How many forward states are kept for the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Checkpointing {
    /// Every state is stored.
    Full,
    /// States are stored every `n` steps and recomputed in between.
    Every(usize),
}

impl Checkpointing {
    fn stride(self) -> usize {
        match self {
            Checkpointing::Full => 1,
            Checkpointing::Every(n) => n.max(1),
        }
    }
}

/// Accumulated gradients of the shared GRU.
struct GruGrad {
    a_r: DMatrix<f64>,
    a_s: DMatrix<f64>,
    a_x: DMatrix<f64>,
    b_r: DMatrix<f64>,
    b_s: DMatrix<f64>,
    b_x: DMatrix<f64>,
    bias_r: DVector<f64>,
    bias_s: DVector<f64>,
    bias_x: DVector<f64>,
}

impl GruGrad {
    fn zeros(n: usize, m: usize) -> Self {
        let z = GruCell::zeros(n, m);
        GruGrad {
            a_r: z.a_r,
            a_s: z.a_s,
            a_x: z.a_x,
            b_r: z.b_r,
            b_s: z.b_s,
            b_x: z.b_x,
            bias_r: z.bias_r,
            bias_s: z.bias_s,
            bias_x: z.bias_x,
        }
    }
}

fn step(
    sh: &MtRnnShared,
    th: &MtRnnTheta,
    b2h: &DMatrix<f64>,
    x1: &DVector<f64>,
    x2: &DVector<f64>,
    u: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let n1 = sh.gru.trace(x1, u).out;
    let mut pre = sh.b2.clone();
    pre.gemv(1.0, &th.a2, x2, 1.0);
    pre.gemv(1.0, b2h, x1, 1.0);
    (n1, pre.map(f64::tanh))
}

/// Returns `(∂L/∂θ, ∂L/∂shared)` given `∂L/∂Ŷ`.
pub fn vjp(
    spec: &MtRnnSpec,
    shared: &[f64],
    theta: &[f64],
    u: &DMatrix<f64>,
    d_yhat: &DMatrix<f64>,
    checkpointing: Checkpointing,
) -> Result<(DVector<f64>, Vec<f64>)> {
    if u.ncols() != spec.n_u {
        return Err(MtdsError::dim("MT-RNN input columns", spec.n_u, u.ncols()));
    }
    let sh = spec.unpack_shared(shared)?;
    let th = spec.unpack_theta(theta)?;
    let b2h = &th.b2 * &sh.h;
    let t_len = u.nrows();
    let stride = checkpointing.stride();
    let ut = u.transpose();
    let u_col = |t: usize| ut.column(t).into_owned();

    // forward, keeping checkpoints at multiples of `stride`
    let mut checkpoints: Vec<(DVector<f64>, DVector<f64>)> = Vec::with_capacity(t_len / stride + 1);
    let mut x1 = DVector::zeros(spec.n1);
    let mut x2 = DVector::zeros(spec.n2);
    for t in 0..t_len {
        if t % stride == 0 {
            checkpoints.push((x1.clone(), x2.clone()));
        }
        let (a, b) = step(&sh, &th, &b2h, &x1, &x2, &u_col(t));
        x1 = a;
        x2 = b;
    }

    let (n1, n2, ny, ell) = (spec.n1, spec.n2, spec.n_y, spec.ell);
    let mut g_gru = GruGrad::zeros(n1, spec.n_u);
    let mut g_h = DMatrix::zeros(ell, n1);
    let mut g_b2 = DVector::zeros(n2);
    let mut g_a2 = DMatrix::zeros(n2, n2);
    let mut g_bb2 = DMatrix::zeros(n2, ell);
    let mut g_c = DMatrix::zeros(ny, n2);
    let mut g_d = DVector::zeros(ny);

    // adjoints of x1_t and x2_t
    let mut adj1 = DVector::zeros(n1);
    let mut adj2 = DVector::zeros(n2);
    let c_t = th.c.transpose();
    let a2_t = th.a2.transpose();
    let bb2_t = th.b2.transpose();
    let h_t = sh.h.transpose();

    for (seg, (c1, c2)) in checkpoints.iter().enumerate().rev() {
        let start = seg * stride;
        let end = (start + stride).min(t_len);
        // states start..=end for this segment
        let mut s1 = Vec::with_capacity(end - start + 1);
        let mut s2 = Vec::with_capacity(end - start + 1);
        s1.push(c1.clone());
        s2.push(c2.clone());
        for t in start..end {
            let (a, b) = step(&sh, &th, &b2h, &s1[t - start], &s2[t - start], &u_col(t));
            s1.push(a);
            s2.push(b);
        }
        for t in (start..end).rev() {
            let k = t - start;
            let x1p = &s1[k];
            let x2p = &s2[k];
            let x2n = &s2[k + 1];
            let ut_c = u_col(t);
            let dy = d_yhat.row(t).transpose();

            g_d += &dy;
            g_c.ger(1.0, &dy, x2n, 1.0);
            adj2.gemv(1.0, &c_t, &dy, 1.0);

            // second layer
            let dp2 = adj2.zip_map(x2n, |g, y| g * (1.0 - y * y));
            let hx = &sh.h * x1p;
            g_a2.ger(1.0, &dp2, x2p, 1.0);
            g_bb2.ger(1.0, &dp2, &hx, 1.0);
            g_b2 += &dp2;
            let d_hx = &bb2_t * &dp2;
            g_h.ger(1.0, &d_hx, x1p, 1.0);
            let mut prev1 = &h_t * &d_hx;
            let prev2 = &a2_t * &dp2;

            // GRU
            let tr = sh.gru.trace(x1p, &ut_c);
            let d_xhat = adj1.component_mul(&tr.g_s);
            let d_gs = adj1.component_mul(&(&tr.x_hat - x1p));
            prev1 += adj1.zip_map(&tr.g_s, |g, s| g * (1.0 - s));

            let dpx = d_xhat.zip_map(&tr.x_hat, |g, y| g * (1.0 - y * y));
            let rx = tr.g_r.component_mul(x1p);
            g_gru.a_x.ger(1.0, &dpx, &rx, 1.0);
            g_gru.b_x.ger(1.0, &dpx, &ut_c, 1.0);
            g_gru.bias_x += &dpx;
            let d_rx = sh.gru.a_x.transpose() * &dpx;
            let d_gr = d_rx.component_mul(x1p);
            prev1 += d_rx.component_mul(&tr.g_r);

            let dps = d_gs.zip_map(&tr.g_s, |g, s| g * s * (1.0 - s));
            g_gru.a_s.ger(1.0, &dps, x1p, 1.0);
            g_gru.b_s.ger(1.0, &dps, &ut_c, 1.0);
            g_gru.bias_s += &dps;
            prev1 += sh.gru.a_s.transpose() * &dps;

            let dpr = d_gr.zip_map(&tr.g_r, |g, s| g * s * (1.0 - s));
            g_gru.a_r.ger(1.0, &dpr, x1p, 1.0);
            g_gru.b_r.ger(1.0, &dpr, &ut_c, 1.0);
            g_gru.bias_r += &dpr;
            prev1 += sh.gru.a_r.transpose() * &dpr;

            adj1 = prev1;
            adj2 = prev2;
        }
    }

    let mut d_theta = Vec::with_capacity(spec.n_params());
    push_row_major(&mut d_theta, &g_a2);
    push_row_major(&mut d_theta, &g_bb2);
    push_row_major(&mut d_theta, &g_c);
    d_theta.extend(g_d.iter());

    let mut d_shared = Vec::with_capacity(spec.n_shared());
    for m in [&g_gru.a_r, &g_gru.a_s, &g_gru.a_x, &g_gru.b_r, &g_gru.b_s, &g_gru.b_x] {
        push_row_major(&mut d_shared, m);
    }
    for v in [&g_gru.bias_r, &g_gru.bias_s, &g_gru.bias_x] {
        d_shared.extend(v.iter());
    }
    push_row_major(&mut d_shared, &g_h);
    d_shared.extend(g_b2.iter());
    Ok((DVector::from_vec(d_theta), d_shared))
}
