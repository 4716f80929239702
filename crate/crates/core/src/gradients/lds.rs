//! Adjoint recursion for the block-diagonal LDS.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::models::lds::{LdsSpec, RADIUS_CAP};
use crate::numeric::sigmoid;

/// Vector-Jacobian product `∂L/∂θ` given `∂L/∂Ŷ`.
pub fn vjp(spec: &LdsSpec, theta: &[f64], u: &DMatrix<f64>, d_yhat: &DMatrix<f64>) -> Result<DVector<f64>> {
    let m = spec.unpack(theta)?;
    let (states, _) = spec.simulate_states(theta, u)?;
    let t_len = u.nrows();
    let (n_x, n_u, n_y) = (spec.n_x, spec.n_u, spec.n_y);

    let mut d_a = DMatrix::zeros(n_x, n_x);
    let mut d_b = DMatrix::zeros(n_x, n_u);
    let mut d_c = DMatrix::zeros(n_y, n_x);
    let mut d_d = DVector::zeros(n_y);
    // adj holds ∂L/∂x_t
    let mut adj = DVector::zeros(n_x);
    let mut carry = DVector::zeros(n_x);
    let a_t = m.a.transpose();
    let c_t = m.c.transpose();
    for t in (0..t_len).rev() {
        let dy = d_yhat.row(t).transpose();
        let x_t = states.column(t + 1);
        let x_prev = states.column(t);
        d_d += &dy;
        d_c.ger(1.0, &dy, &x_t, 1.0);
        adj.gemv(1.0, &c_t, &dy, 0.0);
        adj += &carry;
        d_b.ger(1.0, &adj, &u.row(t).transpose(), 1.0);
        d_a.ger(1.0, &adj, &x_prev, 1.0);
        carry.gemv(1.0, &a_t, &adj, 0.0);
    }

    let mut grad = DVector::zeros(spec.n_params());
    for blk in 0..spec.n_blocks() {
        let i = 2 * blk;
        let raw_r = theta[i];
        let omega = theta[i + 1];
        let s = sigmoid(raw_r);
        let r = RADIUS_CAP * s;
        let (sin, cos) = omega.sin_cos();
        let (g00, g01, g10, g11) = (d_a[(i, i)], d_a[(i, i + 1)], d_a[(i + 1, i)], d_a[(i + 1, i + 1)]);
        let d_r = g00 * cos - g01 * sin + g10 * sin + g11 * cos;
        let d_omega = r * (-g00 * sin - g01 * cos + g10 * cos - g11 * sin);
        grad[i] = d_r * RADIUS_CAP * s * (1.0 - s);
        grad[i + 1] = d_omega;
    }
    if n_x % 2 == 1 {
        let i = n_x - 1;
        let th = theta[i].tanh();
        grad[i] = d_a[(i, i)] * RADIUS_CAP * (1.0 - th * th);
    }
    let mut off = spec.b_offset();
    for r in 0..n_x {
        for c in 0..n_u {
            grad[off] = d_b[(r, c)];
            off += 1;
        }
    }
    for r in 0..n_y {
        for c in 0..n_x {
            grad[off] = d_c[(r, c)];
            off += 1;
        }
    }
    for j in 0..n_y {
        grad[off + j] = d_d[j];
    }
    Ok(grad)
}
