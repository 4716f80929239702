//! Comparator models and the evaluation protocol.
//!
//! * Pooled: one θ shared by every sequence.
//! * Pooled-α: the pooled θ with each channel's additive output offset
//!   inferred online by conjugate Gaussian updating.
//! * Single task: a per-sequence posterior over the unconstrained
//!   parameters under a wide Gaussian prior, by adaptive importance
//!   sampling from a Laplace start.

mod eval;
mod single;

use nalgebra::{DMatrix, DVector};

use crate::error::{MtdsError, Result};
use crate::learning::{train, TrainConfig, TrainLogRow};
use crate::models::{BaseModel, NoisePrecision};
use crate::types::{SequenceDataset, SequenceRecord};

pub use eval::{
    loo_driver, mtds_anchor_forecasts, run_fold, windowed_rmse, AnchorForecast, EvalReport, EvalRow, LooConfig,
    LooReport, Method, SkippedWindow,
};
pub use single::{single_task_fit, SingleTaskConfig, SingleTaskFit};

/// Smallest offset-prior variance produced by [`OffsetPrior::from_pooled`].
pub const OFFSET_VAR_FLOOR: f64 = 1e-6;

/// One-size-fits-all parameters.
#[derive(Debug, Clone)]
pub struct PooledFit {
    pub model: BaseModel,
    pub theta: DVector<f64>,
    pub shared: Vec<f64>,
    pub nu: NoisePrecision,
    pub log: Vec<TrainLogRow>,
}

impl PooledFit {
    /// Noiseless prediction over the whole input sequence.
    pub fn simulate(&self, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.model.simulate(&self.shared, self.theta.as_slice(), u)
    }
}

/// Trains with the loadings held at zero, so every sequence shares
/// `θ = f(b)` and the objective is the pooled log-likelihood.
pub fn pooled_fit(dataset: &SequenceDataset, model: &BaseModel, cfg: &TrainConfig) -> Result<PooledFit> {
    let cfg = TrainConfig {
        freeze_loadings: true,
        ..cfg.clone()
    };
    let out = train(dataset, model, 1, &cfg)?;
    Ok(PooledFit {
        model: model.clone(),
        theta: out.state.gen.default_theta(),
        nu: out.state.nu()?,
        shared: out.state.shared,
        log: out.log,
    })
}

/// Independent Gaussians over the per-channel output offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetPrior {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
}

impl OffsetPrior {
    pub fn new(mean: DVector<f64>, var: DVector<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(MtdsError::dim("offset variances", mean.len(), var.len()));
        }
        if var.iter().any(|v| !(*v > 0.0 && v.is_finite())) || mean.iter().any(|m| !m.is_finite()) {
            return Err(MtdsError::invalid(
                "offset prior",
                "variances must be positive and values finite",
            ));
        }
        Ok(OffsetPrior { mean, var })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Gaussian fitted to the per-sequence offsets that best fit each
    /// training sequence with every other pooled parameter held fixed,
    /// i.e. the pooled offset plus the mean observed residual.
    pub fn from_pooled(fit: &PooledFit, dataset: &SequenceDataset) -> Result<Self> {
        let idx = fit.model.offset_indices();
        let n_y = idx.len();
        let mut per_channel: Vec<Vec<f64>> = vec![Vec::new(); n_y];
        for rec in &dataset.sequences {
            let yhat = fit.simulate(&rec.u)?;
            for (j, vals) in per_channel.iter_mut().enumerate() {
                let (sum, n) = residual_sum(rec, &yhat, j);
                if n > 0 {
                    vals.push(fit.theta[idx[j]] + sum / n as f64);
                }
            }
        }
        let mut mean = DVector::zeros(n_y);
        let mut var = DVector::zeros(n_y);
        for (j, vals) in per_channel.iter().enumerate() {
            if vals.is_empty() {
                mean[j] = fit.theta[idx[j]];
                var[j] = 1.0;
                continue;
            }
            let n = vals.len() as f64;
            let m = vals.iter().sum::<f64>() / n;
            mean[j] = m;
            var[j] = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).max(OFFSET_VAR_FLOOR);
        }
        OffsetPrior::new(mean, var)
    }
}

fn residual_sum(rec: &SequenceRecord, yhat: &DMatrix<f64>, j: usize) -> (f64, usize) {
    (0..rec.len())
        .filter(|&t| rec.mask[(t, j)])
        .fold((0.0, 0), |(s, n), t| (s + rec.y[(t, j)] - yhat[(t, j)], n + 1))
}

/// Offset posterior and the offset-adjusted forecast.
#[derive(Debug, Clone)]
pub struct PooledAlphaForecast {
    pub posterior: OffsetPrior,
    /// `H × n_y` prediction over the future inputs.
    pub mean: DMatrix<f64>,
}

/// Conjugate update of each channel's offset from the observed prefix,
/// then a forecast over `u_future` using the posterior-mean offsets.
/// Per channel: precision `1/v₀ + n ν`, mean `(m₀/v₀ + ν Σ r) / precision`
/// with `r` the residuals of the pooled model without its offset.
pub fn pooled_alpha_filter(
    fit: &PooledFit,
    prefix: &SequenceRecord,
    u_future: &DMatrix<f64>,
    prior: &OffsetPrior,
) -> Result<PooledAlphaForecast> {
    let idx = fit.model.offset_indices();
    let n_y = idx.len();
    if prior.len() != n_y || prefix.n_y() != n_y || fit.nu.len() != n_y {
        return Err(MtdsError::dim("offset channels", n_y, prior.len()));
    }
    if u_future.ncols() != prefix.n_u() {
        return Err(MtdsError::dim("future inputs", prefix.n_u(), u_future.ncols()));
    }
    let (t0, h) = (prefix.len(), u_future.nrows());
    let mut u = DMatrix::zeros(t0 + h, prefix.n_u());
    u.rows_mut(0, t0).copy_from(&prefix.u);
    u.rows_mut(t0, h).copy_from(u_future);
    let yhat = fit.simulate(&u)?;

    let mut mean = DVector::zeros(n_y);
    let mut var = DVector::zeros(n_y);
    for j in 0..n_y {
        let alpha0 = fit.theta[idx[j]];
        let (sum, n) = residual_sum(prefix, &yhat.rows(0, t0).into_owned(), j);
        let nu = fit.nu.nu[j];
        let prec = 1.0 / prior.var[j] + n as f64 * nu;
        // residuals against the offset-free prediction add back α₀
        mean[j] = (prior.mean[j] / prior.var[j] + nu * (sum + n as f64 * alpha0)) / prec;
        var[j] = 1.0 / prec;
    }
    let mut out = yhat.rows(t0, h).into_owned();
    for j in 0..n_y {
        let shift = mean[j] - fit.theta[idx[j]];
        out.column_mut(j).add_scalar_mut(shift);
    }
    Ok(PooledAlphaForecast {
        posterior: OffsetPrior { mean, var },
        mean: out,
    })
}
