use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::adais::{adais_fit_with_rng, floor_eigenvalues, AdaIsConfig, AdaIsDiagnostics, GaussianMixture};
use crate::error::{MtdsError, Result};
use crate::generator::ParamGenerator;
use crate::models::{gaussian_loglik, BaseModel, NoisePrecision};
use crate::types::SequenceRecord;

#[derive(Debug, Clone, PartialEq)]
pub struct SingleTaskConfig {
    /// Prior standard deviation of every unconstrained parameter.
    pub prior_sd: f64,
    pub adais: AdaIsConfig,
    /// Optimizer restarts; the first starts from the model default.
    pub n_starts: usize,
    pub max_lm_iters: usize,
    /// Variance inflation of the Laplace proposal.
    pub laplace_inflation: f64,
}

impl Default for SingleTaskConfig {
    fn default() -> Self {
        SingleTaskConfig {
            prior_sd: 100.0,
            adais: AdaIsConfig {
                j: 1,
                ..AdaIsConfig::default()
            },
            n_starts: 4,
            max_lm_iters: 2000,
            laplace_inflation: 2.0,
        }
    }
}

/// Posterior over the unconstrained parameter vector `r` with `θ = f(r)`.
#[derive(Debug, Clone)]
pub struct SingleTaskFit {
    pub posterior: GaussianMixture,
    /// Identity-loading generator mapping `r` to θ, for forecasting with
    /// [`crate::adais::posterior_predictive`].
    pub generator: ParamGenerator,
    /// Highest-posterior unconstrained point found by the optimizer.
    pub map_raw: DVector<f64>,
    /// Importance-weighted posterior mean of θ.
    pub mean_theta: DVector<f64>,
    pub diagnostics: AdaIsDiagnostics,
    /// Set when the ESS target was never reached; the posterior is then a
    /// best effort.
    pub warning: bool,
}

/// Per-sequence posterior under an `N(0, prior_sd² I)` prior on the
/// unconstrained parameters. A record without observations returns the
/// prior.
pub fn single_task_fit(
    record: &SequenceRecord,
    model: &BaseModel,
    shared: &[f64],
    nu: &NoisePrecision,
    cfg: &SingleTaskConfig,
) -> Result<SingleTaskFit> {
    if !(cfg.prior_sd > 0.0) || cfg.n_starts == 0 || !(cfg.laplace_inflation >= 1.0) {
        return Err(MtdsError::invalid(
            "single_task",
            "prior_sd > 0, n_starts ≥ 1 and inflation ≥ 1 are required",
        ));
    }
    cfg.adais.validate()?;
    if record.n_u() != model.n_u() || record.n_y() != model.n_y() || nu.len() != model.n_y() {
        return Err(MtdsError::dim("record outputs", model.n_y(), record.n_y()));
    }
    let d = model.n_params();
    let constraints = model.constraints();
    let generator = ParamGenerator::new(DMatrix::identity(d, d), DVector::zeros(d), constraints.clone())?;
    let var0 = cfg.prior_sd * cfg.prior_sd;

    if record.n_observed() == 0 {
        let zero = DVector::zeros(d);
        return Ok(SingleTaskFit {
            posterior: GaussianMixture::single(zero.clone(), DMatrix::identity(d, d) * var0)?,
            mean_theta: constraints.apply(&zero),
            generator,
            map_raw: zero,
            diagnostics: AdaIsDiagnostics::default(),
            warning: false,
        });
    }

    let problem = Problem {
        model,
        shared,
        record,
        nu,
        gen: &generator,
        prior_sd: cfg.prior_sd,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.adais.seed);
    let means: Vec<f64> = (0..record.n_y())
        .map(|j| {
            let obs: Vec<f64> = (0..record.len())
                .filter(|&t| record.mask[(t, j)])
                .map(|t| record.y[(t, j)])
                .collect();
            if obs.is_empty() {
                0.0
            } else {
                obs.iter().sum::<f64>() / obs.len() as f64
            }
        })
        .collect();
    let start = constraints.inverse(model.default_theta(&means).as_slice())?;
    let mut best: Option<(f64, DVector<f64>, DMatrix<f64>)> = None;
    for s in 0..cfg.n_starts {
        let x0 = if s == 0 {
            start.clone()
        } else {
            &start + DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
        };
        if let Some((cost, x, jtj)) = problem.levenberg_marquardt(x0, cfg.max_lm_iters) {
            if best.as_ref().is_none_or(|b| cost < b.0) {
                best = Some((cost, x, jtj));
            }
        }
    }
    let (_, map_raw, jtj) = best.ok_or(MtdsError::NoSupport)?;
    let cov = jtj
        .clone()
        .try_inverse()
        .map(|c| (&c + c.transpose()) * (0.5 * cfg.laplace_inflation))
        .unwrap_or_else(|| DMatrix::identity(d, d) * var0);
    let (cov, _) = floor_eigenvalues(&cov, cfg.adais.cov_floor);
    let q0 = GaussianMixture::single(map_raw.clone(), cov)?;

    let target = |r: &DVector<f64>| problem.log_posterior(r);
    match adais_fit_with_rng(target, &q0, &cfg.adais, &mut rng) {
        Ok(fit) => {
            let mean_theta = fit
                .sample
                .particles
                .iter()
                .zip(&fit.sample.normalized_weights)
                .fold(DVector::zeros(d), |acc, (r, w)| acc + constraints.apply(r) * *w);
            Ok(SingleTaskFit {
                posterior: fit.gmm,
                generator,
                mean_theta,
                warning: !fit.diagnostics.reached,
                diagnostics: fit.diagnostics,
                map_raw,
            })
        }
        Err(MtdsError::NoSupport) => Ok(SingleTaskFit {
            posterior: q0,
            generator,
            mean_theta: constraints.apply(&map_raw),
            map_raw,
            diagnostics: AdaIsDiagnostics::default(),
            warning: true,
        }),
        Err(e) => Err(e),
    }
}

struct Problem<'a> {
    model: &'a BaseModel,
    shared: &'a [f64],
    record: &'a SequenceRecord,
    nu: &'a NoisePrecision,
    gen: &'a ParamGenerator,
    prior_sd: f64,
}

impl Problem<'_> {
    fn log_posterior(&self, r: &DVector<f64>) -> f64 {
        let ll = self
            .gen
            .apply_vec(r)
            .and_then(|theta| self.model.simulate(self.shared, theta.as_slice(), &self.record.u))
            .map(|yhat| gaussian_loglik(&yhat, &self.record.y, &self.record.mask, self.nu));
        match ll {
            Ok(v) if !v.is_nan() => v - 0.5 * r.norm_squared() / (self.prior_sd * self.prior_sd),
            _ => f64::NEG_INFINITY,
        }
    }

    /// Whitened residuals: `√ν_j (ŷ − y)` over observed entries, then
    /// `r / prior_sd`. Half the squared norm is the negative log posterior
    /// up to a constant.
    fn residuals(&self, r: &DVector<f64>) -> Option<DVector<f64>> {
        let theta = self.gen.apply_vec(r).ok()?;
        let yhat = self
            .model
            .simulate(self.shared, theta.as_slice(), &self.record.u)
            .ok()?;
        let rec = self.record;
        let mut out = Vec::with_capacity(rec.n_observed() + r.len());
        for t in 0..rec.len() {
            for j in 0..rec.n_y() {
                if rec.mask[(t, j)] {
                    out.push(self.nu.nu[j].sqrt() * (yhat[(t, j)] - rec.y[(t, j)]));
                }
            }
        }
        out.extend(r.iter().map(|v| v / self.prior_sd));
        let v = DVector::from_vec(out);
        v.iter().all(|x| x.is_finite()).then_some(v)
    }

    /// Central-difference Jacobian of [`Self::residuals`].
    fn jacobian(&self, r: &DVector<f64>, n_res: usize) -> Option<DMatrix<f64>> {
        let mut jac = DMatrix::zeros(n_res, r.len());
        for i in 0..r.len() {
            let h = 1e-6 * r[i].abs().max(1.0);
            let mut hi = r.clone();
            hi[i] += h;
            let mut lo = r.clone();
            lo[i] -= h;
            let col = (self.residuals(&hi)? - self.residuals(&lo)?) / (2.0 * h);
            jac.set_column(i, &col);
        }
        Some(jac)
    }

    /// Returns `(½‖e‖², x, JᵀJ)` at the final iterate, or `None` when the
    /// start cannot be evaluated.
    fn levenberg_marquardt(&self, mut x: DVector<f64>, max_iters: usize) -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
        let mut e = self.residuals(&x)?;
        let mut cost = 0.5 * e.norm_squared();
        let mut lambda = 1e-3;
        let mut jac = self.jacobian(&x, e.len())?;
        for _ in 0..max_iters {
            let jtj = jac.transpose() * &jac;
            let g = jac.transpose() * &e;
            if g.amax() < 1e-10 {
                break;
            }
            let mut improved = false;
            while lambda < 1e12 {
                let mut a = jtj.clone();
                for i in 0..a.nrows() {
                    a[(i, i)] += lambda * (jtj[(i, i)] + 1e-12);
                }
                let Some(step) = a.cholesky().map(|c| c.solve(&(-&g))) else {
                    lambda *= 10.0;
                    continue;
                };
                let cand = &x + &step;
                match self.residuals(&cand) {
                    Some(e2) if 0.5 * e2.norm_squared() < cost => {
                        let new_cost = 0.5 * e2.norm_squared();
                        let rel = (cost - new_cost) / cost.max(1e-300);
                        x = cand;
                        e = e2;
                        cost = new_cost;
                        lambda = (lambda / 10.0).max(1e-12);
                        improved = rel > 1e-14;
                        break;
                    }
                    _ => lambda *= 10.0,
                }
            }
            if !improved {
                break;
            }
            jac = self.jacobian(&x, e.len())?;
        }
        let jtj = jac.transpose() * &jac;
        Some((cost, x, jtj))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::PdSpec;

    fn truth() -> (BaseModel, DVector<f64>) {
        let model = BaseModel::Pd(PdSpec::standard(1));
        let mut th = model.default_theta(&[0.4]);
        th[1] = 0.8;
        th[2] = 0.5;
        th[3] = 0.3;
        for r in 0..8 {
            th[4 + r] = 0.3 + 0.05 * r as f64;
        }
        (model, th)
    }

    fn record(model: &BaseModel, theta: &DVector<f64>, t_len: usize, sd: f64, seed: u64) -> SequenceRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = DMatrix::from_fn(t_len, 1, |t, _| [5.0, 0.5, 3.0, 1.5][(t / 12) % 4]);
        let mut y = model.simulate(&[], theta.as_slice(), &u).unwrap();
        y.apply(|v| *v += sd * rng.sample::<f64, _>(StandardNormal));
        SequenceRecord::complete("st", u, y).unwrap()
    }

    fn sim_rmse(model: &BaseModel, theta: &DVector<f64>, rec: &SequenceRecord) -> f64 {
        let yhat = model.simulate(&[], theta.as_slice(), &rec.u).unwrap();
        ((&yhat - &rec.y).norm_squared() / rec.len() as f64).sqrt()
    }

    fn cfg(seed: u64) -> SingleTaskConfig {
        SingleTaskConfig {
            adais: AdaIsConfig {
                m: 2000,
                m_ess: 500.0,
                j: 1,
                seed,
                ..AdaIsConfig::default()
            },
            ..SingleTaskConfig::default()
        }
    }

    #[test]
    fn empty_record_returns_the_prior() {
        let (model, th) = truth();
        let rec = record(&model, &th, 10, 0.1, 1).prefix(0);
        let nu = NoisePrecision::uniform(1, 100.0).unwrap();
        let fit = single_task_fit(&rec, &model, &[], &nu, &cfg(1)).unwrap();
        assert_eq!(fit.posterior.n_components(), 1);
        assert_eq!(fit.posterior.mean(), DVector::zeros(12));
        assert_eq!(fit.posterior.covariance(), DMatrix::identity(12, 12) * 1e4);
        assert!(!fit.warning);
    }

    #[test]
    fn long_record_fits_close_to_the_truth() {
        let (model, th) = truth();
        let sd = 0.05;
        let rec = record(&model, &th, 200, sd, 2);
        let nu = NoisePrecision::uniform(1, 1.0 / (sd * sd)).unwrap();
        let fit = single_task_fit(&rec, &model, &[], &nu, &cfg(3)).unwrap();
        let truth_rmse = sim_rmse(&model, &th, &rec);
        let fit_rmse = sim_rmse(&model, &fit.mean_theta, &rec);
        assert!(fit_rmse <= 2.0 * truth_rmse, "{fit_rmse} vs {truth_rmse}");
        let map = fit.generator.apply_vec(&fit.map_raw).unwrap();
        let map_rmse = sim_rmse(&model, &map, &rec);
        assert!(
            map_rmse <= truth_rmse * 1.01,
            "map {map_rmse} truth {truth_rmse} mean {fit_rmse} warn {} ess {:?}",
            fit.warning,
            fit.diagnostics.ess_trace
        );
    }

    #[test]
    fn same_seed_same_posterior() {
        let (model, th) = truth();
        let rec = record(&model, &th, 60, 0.1, 4);
        let nu = NoisePrecision::uniform(1, 100.0).unwrap();
        let a = single_task_fit(&rec, &model, &[], &nu, &cfg(5)).unwrap();
        let b = single_task_fit(&rec, &model, &[], &nu, &cfg(5)).unwrap();
        assert_eq!(a.posterior, b.posterior);
        assert_eq!(a.mean_theta, b.mean_theta);
        assert_eq!(a.warning, b.warning);
    }

    #[test]
    fn unreachable_ess_sets_the_warning() {
        let (model, th) = truth();
        let rec = record(&model, &th, 60, 0.1, 6);
        let nu = NoisePrecision::uniform(1, 100.0).unwrap();
        let mut c = cfg(7);
        c.adais.m = 50;
        c.adais.m_ess = 50.0;
        c.adais.n_adais = 1;
        let fit = single_task_fit(&rec, &model, &[], &nu, &c).unwrap();
        assert!(fit.warning);
        assert!(!fit.diagnostics.reached);
        assert!(fit.mean_theta.iter().all(|v| v.is_finite()));
    }
}
