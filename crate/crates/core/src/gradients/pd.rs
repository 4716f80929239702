//! Adjoint recursion for the PD model. Channels are independent, so each
//! is back-propagated separately.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::models::pd::PdSpec;
use crate::numeric::sigmoid;

pub fn vjp(spec: &PdSpec, theta: &[f64], u: &DMatrix<f64>, d_yhat: &DMatrix<f64>) -> Result<DVector<f64>> {
    let p = spec.params(theta)?;
    let (xs, _) = spec.simulate_states(theta, u)?;
    let t_len = u.nrows();
    let l = spec.basis_size();
    let mut grad = DVector::zeros(spec.n_params());
    let mut ds = vec![0.0; t_len];
    for j in 0..spec.n_y {
        let eta = p.eta(j);
        let mut d_alpha = 0.0;
        let mut d_eta = vec![0.0; l];
        for t in 0..t_len {
            let dy = d_yhat[(t, j)];
            d_alpha += dy;
            let s = xs[(t, j)] + p.beta3[j];
            let mut slope = 0.0;
            for r in 0..l {
                let sg = sigmoid(spec.a[r] * (s - spec.b[r]));
                d_eta[r] += dy * sg;
                slope += eta[r] * spec.a[r] * sg * (1.0 - sg);
            }
            ds[t] = dy * slope;
        }
        let mut d_beta1 = 0.0;
        let mut d_beta2 = 0.0;
        let mut d_beta3 = 0.0;
        let mut adj = 0.0;
        for t in (0..t_len).rev() {
            d_beta3 += ds[t];
            adj = ds[t] + p.beta1[j] * adj;
            let x_prev = if t > 0 { xs[(t - 1, j)] } else { 0.0 };
            d_beta1 += adj * x_prev;
            d_beta2 += adj * u[(t, 0)];
        }
        grad[spec.alpha_index(j)] = d_alpha;
        grad[spec.beta1_index(j)] = d_beta1;
        grad[spec.beta2_index(j)] = d_beta2;
        grad[spec.beta3_index(j)] = d_beta3;
        for r in 0..l {
            grad[spec.eta_index(j, r)] = d_eta[r];
        }
    }
    Ok(grad)
}
