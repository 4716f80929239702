use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{adais_fit_with_rng, AdaIsConfig, AdaIsDiagnostics, GaussianMixture, WeightedSample};
use crate::error::{MtdsError, Result};
use crate::generator::ParamGenerator;
use crate::models::{gaussian_loglik, BaseModel, NoisePrecision};
use crate::numeric::{quantile_sorted, LN_2PI};
use crate::types::SequenceRecord;

/// Steps at which the filter runs: `υ, 2υ, …` and `T` itself.
pub fn filter_times(t_len: usize, thin: usize) -> Vec<usize> {
    let thin = thin.max(1);
    let mut out: Vec<usize> = (1..=t_len / thin).map(|i| i * thin).collect();
    if !t_len.is_multiple_of(thin) {
        out.push(t_len);
    }
    out
}

#[derive(Debug, Clone)]
pub struct FilterStep {
    /// Number of observed steps conditioned on.
    pub t: usize,
    pub gmm: GaussianMixture,
    pub diagnostics: AdaIsDiagnostics,
}

fn std_normal_logpdf(z: &DVector<f64>) -> f64 {
    -0.5 * (z.len() as f64 * LN_2PI + z.norm_squared())
}

fn check_inputs(record: &SequenceRecord, gen: &ParamGenerator, nu: &NoisePrecision, model: &BaseModel) -> Result<()> {
    if gen.d() != model.n_params() {
        return Err(MtdsError::dim("generator output", model.n_params(), gen.d()));
    }
    if record.n_u() != model.n_u() {
        return Err(MtdsError::dim("record inputs", model.n_u(), record.n_u()));
    }
    if record.n_y() != model.n_y() || nu.len() != model.n_y() {
        return Err(MtdsError::dim("record outputs", model.n_y(), record.n_y()));
    }
    Ok(())
}

/// `log p(y_{1:t} | u_{1:t}, h(z)) + log N(z; 0, I)`; `−∞` where the
/// model cannot be simulated.
fn prefix_log_target(
    model: &BaseModel,
    shared: &[f64],
    gen: &ParamGenerator,
    nu: &NoisePrecision,
    prefix: &SequenceRecord,
    z: &DVector<f64>,
) -> f64 {
    let ll = gen
        .apply_vec(z)
        .and_then(|theta| model.simulate(shared, theta.as_slice(), &prefix.u))
        .map(|yhat| gaussian_loglik(&yhat, &prefix.y, &prefix.mask, nu));
    match ll {
        Ok(v) if !v.is_nan() => v + std_normal_logpdf(z),
        _ => f64::NEG_INFINITY,
    }
}

/// Filtered posteriors `q_t` for `t` in [`filter_times`], each adapted
/// from the previous one, starting at the prior.
pub fn sequential_filter(
    record: &SequenceRecord,
    gen: &ParamGenerator,
    shared: &[f64],
    nu: &NoisePrecision,
    model: &BaseModel,
    cfg: &AdaIsConfig,
) -> Result<Vec<FilterStep>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sequential_filter_with_rng(record, gen, shared, nu, model, cfg, &mut rng)
}

#[allow(clippy::too_many_arguments)]
pub fn sequential_filter_with_rng<R: Rng + ?Sized>(
    record: &SequenceRecord,
    gen: &ParamGenerator,
    shared: &[f64],
    nu: &NoisePrecision,
    model: &BaseModel,
    cfg: &AdaIsConfig,
    rng: &mut R,
) -> Result<Vec<FilterStep>> {
    sequential_filter_at(
        record,
        &filter_times(record.len(), cfg.thin),
        gen,
        shared,
        nu,
        model,
        cfg,
        rng,
    )
}

/// As [`sequential_filter_with_rng`] at the given strictly increasing
/// times. A time of 0 yields the prior without sampling.
#[allow(clippy::too_many_arguments)]
pub fn sequential_filter_at<R: Rng + ?Sized>(
    record: &SequenceRecord,
    times: &[usize],
    gen: &ParamGenerator,
    shared: &[f64],
    nu: &NoisePrecision,
    model: &BaseModel,
    cfg: &AdaIsConfig,
    rng: &mut R,
) -> Result<Vec<FilterStep>> {
    cfg.validate()?;
    check_inputs(record, gen, nu, model)?;
    if times.windows(2).any(|w| w[0] >= w[1]) || times.last().is_some_and(|&t| t > record.len()) {
        return Err(MtdsError::invalid(
            "times",
            "must increase strictly and not exceed the record length",
        ));
    }
    let mut q = GaussianMixture::standard(gen.k());
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        if t == 0 {
            out.push(FilterStep {
                t,
                gmm: q.clone(),
                diagnostics: AdaIsDiagnostics::default(),
            });
            continue;
        }
        let prefix = record.prefix(t);
        let target = |z: &DVector<f64>| prefix_log_target(model, shared, gen, nu, &prefix, z);
        let fit = adais_fit_with_rng(target, &q, cfg, rng).map_err(|e| e.at_time(t))?;
        q = fit.gmm;
        out.push(FilterStep {
            t,
            gmm: q.clone(),
            diagnostics: fit.diagnostics,
        });
    }
    Ok(out)
}

/// Adds per-particle log-likelihood increments and renormalizes.
pub fn reweight(prev: &WeightedSample, increments: &[f64]) -> Result<WeightedSample> {
    if increments.len() != prev.len() {
        return Err(MtdsError::dim("increments", prev.len(), increments.len()));
    }
    let log_w = prev.log_weights.iter().zip(increments).map(|(a, b)| a + b).collect();
    WeightedSample::from_log_weights(prev.particles.clone(), log_w)
}

/// Sequential importance reweighting without resampling or moves.
pub fn naive_smc_reweight<F>(prev: &WeightedSample, incremental_loglik: F) -> Result<WeightedSample>
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
{
    let inc: Vec<f64> = prev.particles.par_iter().map(&incremental_loglik).collect();
    reweight(prev, &inc)
}

/// ESS after each observed step when `m` prior particles are only ever
/// reweighted.
#[allow(clippy::too_many_arguments)]
pub fn naive_smc_ess_trace<R: Rng + ?Sized>(
    record: &SequenceRecord,
    gen: &ParamGenerator,
    shared: &[f64],
    nu: &NoisePrecision,
    model: &BaseModel,
    m: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_inputs(record, gen, nu, model)?;
    let prior = GaussianMixture::standard(gen.k());
    let particles: Vec<DVector<f64>> = (0..m).map(|_| prior.sample(rng)).collect();
    // per-particle, per-step log-likelihood terms from one simulation each
    let per_step: Vec<Vec<f64>> = particles
        .par_iter()
        .map(|z| -> Result<Vec<f64>> {
            let theta = gen.apply_vec(z)?;
            let yhat = model.simulate(shared, theta.as_slice(), &record.u)?;
            Ok((0..record.len())
                .map(|t| {
                    let row = |m: &DMatrix<f64>| m.rows(t, 1).into_owned();
                    gaussian_loglik(&row(&yhat), &row(&record.y), &record.mask.rows(t, 1).into_owned(), nu)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut sample = WeightedSample::from_log_weights(particles, vec![0.0; m])?;
    let mut trace = Vec::with_capacity(record.len());
    for t in 0..record.len() {
        let inc: Vec<f64> = per_step.iter().map(|v| v[t]).collect();
        sample = reweight(&sample, &inc)?;
        trace.push(sample.ess());
    }
    Ok(trace)
}

/// Posterior-predictive summary over a forecast horizon.
#[derive(Debug, Clone)]
pub struct Forecast {
    /// Mean of the noiseless simulations, `H × n_y`.
    pub mean: DMatrix<f64>,
    /// Empirical 5% quantile of the noisy paths.
    pub q05: DMatrix<f64>,
    /// Empirical 95% quantile of the noisy paths.
    pub q95: DMatrix<f64>,
    pub paths: Vec<DMatrix<f64>>,
}

/// Forecasts `y` over `u_future` after the observed `prefix` by drawing
/// `z_s ~ q` and simulating the whole input sequence.
#[allow(clippy::too_many_arguments)]
pub fn posterior_predictive<R: Rng + ?Sized>(
    q: &GaussianMixture,
    prefix: &SequenceRecord,
    u_future: &DMatrix<f64>,
    gen: &ParamGenerator,
    shared: &[f64],
    nu: &NoisePrecision,
    model: &BaseModel,
    n_samples: usize,
    rng: &mut R,
) -> Result<Forecast> {
    if n_samples == 0 {
        return Err(MtdsError::invalid("S", "at least one draw is required"));
    }
    check_inputs(prefix, gen, nu, model)?;
    if u_future.ncols() != model.n_u() {
        return Err(MtdsError::dim("future inputs", model.n_u(), u_future.ncols()));
    }
    if q.k() != gen.k() {
        return Err(MtdsError::dim("posterior dimension", gen.k(), q.k()));
    }
    let (t0, h, n_y) = (prefix.len(), u_future.nrows(), model.n_y());
    let mut u = DMatrix::zeros(t0 + h, model.n_u());
    u.rows_mut(0, t0).copy_from(&prefix.u);
    u.rows_mut(t0, h).copy_from(u_future);

    let zs: Vec<DVector<f64>> = (0..n_samples).map(|_| q.sample(rng)).collect();
    let noise: Vec<DMatrix<f64>> = (0..n_samples)
        .map(|_| DMatrix::from_fn(h, n_y, |_, _| rng.sample(StandardNormal)))
        .collect();
    let sims: Vec<DMatrix<f64>> = zs
        .par_iter()
        .map(|z| {
            let theta = gen.apply_vec(z)?;
            Ok(model.simulate(shared, theta.as_slice(), &u)?.rows(t0, h).into_owned())
        })
        .collect::<Result<_>>()?;

    let sd = nu.std();
    let mut mean = DMatrix::zeros(h, n_y);
    for s in &sims {
        mean += s;
    }
    mean /= n_samples as f64;
    let paths: Vec<DMatrix<f64>> = sims
        .iter()
        .zip(&noise)
        .map(|(s, e)| DMatrix::from_fn(h, n_y, |t, j| s[(t, j)] + sd[j] * e[(t, j)]))
        .collect();
    let mut q05 = DMatrix::zeros(h, n_y);
    let mut q95 = DMatrix::zeros(h, n_y);
    let mut buf = vec![0.0; n_samples];
    for t in 0..h {
        for j in 0..n_y {
            for (b, p) in buf.iter_mut().zip(&paths) {
                *b = p[(t, j)];
            }
            buf.sort_by(f64::total_cmp);
            q05[(t, j)] = quantile_sorted(&buf, 0.05);
            q95[(t, j)] = quantile_sorted(&buf, 0.95);
        }
    }
    Ok(Forecast { mean, q05, q95, paths })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adais::adais_fit;
    use crate::models::PdSpec;
    use crate::numeric::log_sum_exp;

    fn pd_family(n_y: usize) -> (BaseModel, ParamGenerator) {
        let spec = PdSpec::standard(n_y);
        let model = BaseModel::Pd(spec.clone());
        let c = model.constraints();
        let offsets: Vec<f64> = (0..n_y).map(|j| 1.0 + 0.3 * j as f64).collect();
        let b = c.inverse(model.default_theta(&offsets).as_slice()).unwrap();
        let mut w = DMatrix::zeros(model.n_params(), 1);
        for j in 0..n_y {
            w[(spec.alpha_index(j), 0)] = 0.5;
            w[(spec.beta3_index(j), 0)] = 0.3;
        }
        (model, ParamGenerator::new(w, b, c).unwrap())
    }

    fn pd_record(model: &BaseModel, gen: &ParamGenerator, z: f64, t_len: usize, nu: f64, seed: u64) -> SequenceRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = DMatrix::from_fn(t_len, 1, |t, _| if (t / 10) % 2 == 0 { 3.0 } else { 0.5 });
        let theta = gen.apply_vec(&DVector::from_element(1, z)).unwrap();
        let mut y = model.simulate(&[], theta.as_slice(), &u).unwrap();
        y.apply(|v| *v += rng.sample::<f64, _>(StandardNormal) / nu.sqrt());
        SequenceRecord::complete("x", u, y).unwrap()
    }

    /// Normalized grid posterior of a k = 1 target.
    fn grid_posterior(f: impl Fn(&DVector<f64>) -> f64, lo: f64, hi: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
        let zs: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
        let lp: Vec<f64> = zs.iter().map(|z| f(&DVector::from_element(1, *z))).collect();
        let lse = log_sum_exp(&lp);
        (zs, lp.iter().map(|l| (l - lse).exp()).collect())
    }

    fn tv_to_mixture(zs: &[f64], p: &[f64], g: &GaussianMixture) -> f64 {
        let lq: Vec<f64> = zs.iter().map(|z| g.logpdf(&DVector::from_element(1, *z))).collect();
        let lse = log_sum_exp(&lq);
        0.5 * p.iter().zip(&lq).map(|(a, l)| (a - (l - lse).exp()).abs()).sum::<f64>()
    }

    #[test]
    fn explicit_times_are_checked() {
        let (model, gen) = pd_family(1);
        let nu = NoisePrecision::uniform(1, 4.0).unwrap();
        let rec = pd_record(&model, &gen, 0.0, 10, 4.0, 1);
        let cfg = AdaIsConfig {
            m: 200,
            m_ess: 50.0,
            j: 1,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for bad in [vec![3, 3], vec![5, 2], vec![11]] {
            assert!(sequential_filter_at(&rec, &bad, &gen, &[], &nu, &model, &cfg, &mut rng).is_err());
        }
        let steps = sequential_filter_at(&rec, &[0, 4], &gen, &[], &nu, &model, &cfg, &mut rng).unwrap();
        assert_eq!(steps[0].gmm, GaussianMixture::standard(1));
        assert!(steps[0].diagnostics.ess_trace.is_empty());
        assert_eq!(steps[1].t, 4);
    }

    #[test]
    fn times_include_the_end() {
        assert_eq!(filter_times(10, 3), vec![3, 6, 9, 10]);
        assert_eq!(filter_times(9, 3), vec![3, 6, 9]);
        assert_eq!(filter_times(4, 1), vec![1, 2, 3, 4]);
    }

    #[test]
    fn flat_likelihood_keeps_the_prior() {
        let (model, gen) = pd_family(1);
        let gen = ParamGenerator::constant(gen.b.clone(), 1, gen.constraints.clone()).unwrap();
        let rec = pd_record(&model, &gen, 0.0, 12, 25.0, 1);
        let cfg = AdaIsConfig {
            m: 4000,
            m_ess: 1000.0,
            j: 1,
            thin: 4,
            seed: 2,
            ..Default::default()
        };
        let nu = NoisePrecision::uniform(1, 25.0).unwrap();
        let steps = sequential_filter(&rec, &gen, &[], &nu, &model, &cfg).unwrap();
        assert_eq!(steps.len(), 3);
        for s in &steps {
            assert!(s.gmm.means()[0][0].abs() < 0.1);
            assert!((s.gmm.covs()[0][(0, 0)] - 1.0).abs() < 0.15);
        }
    }

    #[test]
    fn filtered_posterior_matches_grid() {
        let (model, gen) = pd_family(1);
        let nu = NoisePrecision::uniform(1, 16.0).unwrap();
        let rec = pd_record(&model, &gen, 0.8, 60, 16.0, 3);
        let cfg = AdaIsConfig {
            m: 2000,
            m_ess: 500.0,
            j: 2,
            thin: 5,
            seed: 4,
            ..Default::default()
        };
        let steps = sequential_filter(&rec, &gen, &[], &nu, &model, &cfg).unwrap();
        let q_t = &steps.last().unwrap().gmm;
        let target = |z: &DVector<f64>| prefix_log_target(&model, &[], &gen, &nu, &rec, z);
        let (zs, p) = grid_posterior(target, -6.0, 6.0, 512);
        let tv = tv_to_mixture(&zs, &p, q_t);
        assert!(tv < 0.05, "TV {tv}");
        let grid_mean: f64 = zs.iter().zip(&p).map(|(z, w)| z * w).sum();
        let grid_sd = (zs.iter().zip(&p).map(|(z, w)| w * (z - grid_mean).powi(2)).sum::<f64>()).sqrt();
        assert!((q_t.mean()[0] - grid_mean).abs() < 2.0 * grid_sd);

        // one-shot fit on the whole sequence with a matching budget
        let one_shot = adais_fit(
            target,
            &GaussianMixture::standard(1),
            &AdaIsConfig {
                m: 2000 * steps.len(),
                m_ess: 500.0 * steps.len() as f64,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert!(tv_to_mixture(&zs, &p, &one_shot.gmm) < 0.08);
    }

    #[test]
    fn filter_is_reproducible() {
        let (model, gen) = pd_family(2);
        let nu = NoisePrecision::uniform(2, 10.0).unwrap();
        let rec = pd_record(&model, &gen, -0.5, 20, 10.0, 5);
        for quasi in [false, true] {
            let cfg = AdaIsConfig {
                m: 300,
                m_ess: 100.0,
                j: 2,
                thin: 5,
                quasi_random: quasi,
                seed: 6,
                ..Default::default()
            };
            let a = sequential_filter(&rec, &gen, &[], &nu, &model, &cfg).unwrap();
            let b = sequential_filter(&rec, &gen, &[], &nu, &model, &cfg).unwrap();
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.gmm, y.gmm);
            }
        }
    }

    #[test]
    fn reweighting_examples() {
        let p: Vec<DVector<f64>> = (0..5).map(|i| DVector::from_element(1, i as f64)).collect();
        let s = WeightedSample::from_log_weights(p, vec![0.0, -1.0, -2.0, 0.5, 0.0]).unwrap();
        let same = naive_smc_reweight(&s, |_| 3.7).unwrap();
        for (a, b) in same.normalized_weights.iter().zip(&s.normalized_weights) {
            assert!((a - b).abs() < 1e-15);
        }
        let sharp = naive_smc_reweight(&s, |z| -1e4 * (z[0] - 2.0).powi(2)).unwrap();
        assert!((sharp.ess() - 1.0).abs() < 1e-12);
        assert_eq!(sharp.particles, s.particles);
    }

    #[test]
    fn naive_reweighting_degenerates() {
        let (model, gen) = pd_family(1);
        let nu = NoisePrecision::uniform(1, 25.0).unwrap();
        let rec = pd_record(&model, &gen, 1.2, 100, 25.0, 7);
        let trace = naive_smc_ess_trace(&rec, &gen, &[], &nu, &model, 1000, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(trace.len(), 100);
        assert!(trace[99] < 100.0, "{}", trace[99]);
        assert!(trace[99] <= trace[0]);
    }

    #[test]
    fn point_mass_forecast_is_the_simulation() {
        let (model, gen) = pd_family(1);
        let nu = NoisePrecision::uniform(1, 4.0).unwrap();
        let rec = pd_record(&model, &gen, 0.3, 30, 4.0, 9);
        let prefix = rec.prefix(20);
        let future = rec.u.rows(20, 10).into_owned();
        let mu = DVector::from_element(1, 0.3);
        let q = GaussianMixture::single(mu.clone(), DMatrix::from_element(1, 1, 1e-6)).unwrap();
        let f = posterior_predictive(
            &q,
            &prefix,
            &future,
            &gen,
            &[],
            &nu,
            &model,
            50,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let sim = model
            .simulate(&[], gen.apply_vec(&mu).unwrap().as_slice(), &rec.u)
            .unwrap();
        assert!((&f.mean - sim.rows(20, 10)).amax() < 1e-2);
        assert_eq!(f.paths.len(), 50);
        assert!(f.q05.iter().zip(f.q95.iter()).all(|(a, b)| a <= b));
    }

    #[test]
    fn forecast_ignores_posterior_without_loadings() {
        let (model, gen) = pd_family(1);
        let flat = ParamGenerator::new(DMatrix::zeros(gen.d(), 1), gen.b.clone(), gen.constraints.clone()).unwrap();
        let nu = NoisePrecision::uniform(1, 4.0).unwrap();
        let rec = pd_record(&model, &gen, 0.3, 30, 4.0, 9);
        let prefix = rec.prefix(20);
        let future = rec.u.rows(20, 10).into_owned();
        let qa = GaussianMixture::standard(1);
        let qb = GaussianMixture::single(DVector::from_element(1, 3.0), DMatrix::from_element(1, 1, 0.1)).unwrap();
        let a = posterior_predictive(
            &qa,
            &prefix,
            &future,
            &flat,
            &[],
            &nu,
            &model,
            20,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let b = posterior_predictive(
            &qb,
            &prefix,
            &future,
            &flat,
            &[],
            &nu,
            &model,
            20,
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        assert!((&a.mean - &b.mean).amax() < 1e-12);
    }

    #[test]
    fn forecast_mean_matches_grid_quadrature() {
        let (model, gen) = pd_family(1);
        let nu = NoisePrecision::uniform(1, 9.0).unwrap();
        let rec = pd_record(&model, &gen, 0.5, 40, 9.0, 10);
        let prefix = rec.prefix(30);
        let future = rec.u.rows(30, 10).into_owned();
        let q = GaussianMixture::new(
            vec![0.4, 0.6],
            vec![DVector::from_element(1, -0.5), DVector::from_element(1, 0.7)],
            vec![DMatrix::from_element(1, 1, 0.2), DMatrix::from_element(1, 1, 0.1)],
        )
        .unwrap();
        let s = 4000;
        let f = posterior_predictive(
            &q,
            &prefix,
            &future,
            &gen,
            &[],
            &nu,
            &model,
            s,
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        // quadrature over z on a fine grid
        let n = 4001;
        let zs: Vec<f64> = (0..n).map(|i| -6.0 + 12.0 * i as f64 / (n - 1) as f64).collect();
        let lw: Vec<f64> = zs.iter().map(|z| q.logpdf(&DVector::from_element(1, *z))).collect();
        let lse = log_sum_exp(&lw);
        let sims: Vec<DMatrix<f64>> = zs
            .iter()
            .map(|z| {
                let th = gen.apply_vec(&DVector::from_element(1, *z)).unwrap();
                model
                    .simulate(&[], th.as_slice(), &rec.u)
                    .unwrap()
                    .rows(30, 10)
                    .into_owned()
            })
            .collect();
        for t in 0..10 {
            let w: Vec<f64> = lw.iter().map(|l| (l - lse).exp()).collect();
            let m: f64 = sims.iter().zip(&w).map(|(s, wi)| wi * s[(t, 0)]).sum();
            let v: f64 = sims.iter().zip(&w).map(|(s, wi)| wi * (s[(t, 0)] - m).powi(2)).sum();
            let se = (v / s as f64).sqrt();
            assert!(
                (f.mean[(t, 0)] - m).abs() <= 3.0 * se + 1e-12,
                "t {t}: {} vs {m} (se {se})",
                f.mean[(t, 0)]
            );
        }
    }

    #[test]
    fn errors_carry_the_time_index() {
        let (model, gen) = pd_family(1);
        let mut rec = pd_record(&model, &gen, 0.0, 5, 4.0, 1);
        // the squared residual overflows, so no particle has support
        rec.y[(0, 0)] = 1e300;
        let nu = NoisePrecision::uniform(1, 4.0).unwrap();
        let err = sequential_filter(
            &rec,
            &gen,
            &[],
            &nu,
            &model,
            &AdaIsConfig {
                j: 1,
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, MtdsError::AtTime { t: 1, .. }), "{err}");
        assert!(err.is_numerical());
    }
}
