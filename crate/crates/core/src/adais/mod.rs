//! Filtered inference of the latent code by iterated adaptive importance
//! sampling with Gaussian-mixture proposals, the naive reweighting
//! comparator, and posterior-predictive forecasting.

mod filter;
mod mixture;
pub mod sobol;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{MtdsError, Result};
use crate::numeric::log_sum_exp;

pub use filter::{
    filter_times, naive_smc_ess_trace, naive_smc_reweight, posterior_predictive, reweight, sequential_filter,
    sequential_filter_at, sequential_filter_with_rng, FilterStep, Forecast,
};
pub use mixture::{ess, floor_eigenvalues, GaussianMixture, WeightedSample};
use sobol::ScrambledSobol;

#[derive(Debug, Clone, PartialEq)]
pub struct AdaIsConfig {
    /// Particles per adaptation.
    pub m: usize,
    /// Stop once the effective sample size reaches this.
    pub m_ess: f64,
    /// Maximum adaptations per fit.
    pub n_adais: usize,
    /// Mixture components.
    pub j: usize,
    /// Lower bound on covariance eigenvalues.
    pub cov_floor: f64,
    /// Filter every `thin` steps.
    pub thin: usize,
    pub quasi_random: bool,
    pub n_em_iters: usize,
    pub seed: u64,
}

impl Default for AdaIsConfig {
    fn default() -> Self {
        AdaIsConfig {
            m: 1000,
            m_ess: 250.0,
            n_adais: 5,
            j: 4,
            cov_floor: 1e-6,
            thin: 1,
            quasi_random: false,
            n_em_iters: 10,
            seed: 0,
        }
    }
}

impl AdaIsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || !(self.m_ess >= 1.0 && self.m_ess <= self.m as f64) {
            return Err(MtdsError::invalid("adais", "need 1 <= M_ess <= M"));
        }
        if self.n_adais == 0 || self.j == 0 || self.thin == 0 || self.n_em_iters == 0 {
            return Err(MtdsError::invalid(
                "adais",
                "N_adais, J, thin and n_em_iters must be at least 1",
            ));
        }
        if self.j > self.m {
            return Err(MtdsError::invalid("adais", "J must not exceed M"));
        }
        if !(self.cov_floor > 0.0) {
            return Err(MtdsError::invalid("adais", "cov_floor must be positive"));
        }
        Ok(())
    }
}

/// Outcome of [`weighted_em`].
#[derive(Debug, Clone)]
pub struct EmFit {
    pub gmm: GaussianMixture,
    /// The sample's ESS was below `J`; `gmm` is the initialization with
    /// covariances ×4.
    pub fell_back: bool,
    /// Some M-step raised an eigenvalue to the floor.
    pub floored: bool,
    /// `Σ_m w̃_m log q(z_m)` before the first and after every iteration.
    pub loglik_trace: Vec<f64>,
}

/// Brings `init` to `j` components: splits the heaviest component along
/// its principal axis by ±0.5σ, or keeps the `j` heaviest.
pub fn expand_components(init: &GaussianMixture, j: usize) -> GaussianMixture {
    let mut w = init.weights().to_vec();
    let mut mu = init.means().to_vec();
    let mut cov = init.covs().to_vec();
    while w.len() < j {
        let i = (0..w.len()).fold(0, |best, c| if w[c] > w[best] { c } else { best });
        let eig = SymmetricEigen::new(cov[i].clone());
        let top =
            (0..eig.eigenvalues.len()).fold(0, |b, c| if eig.eigenvalues[c] > eig.eigenvalues[b] { c } else { b });
        let step = eig.eigenvectors.column(top) * (0.5 * eig.eigenvalues[top].max(0.0).sqrt());
        let m = mu[i].clone();
        w[i] *= 0.5;
        mu[i] = &m - &step;
        w.push(w[i]);
        mu.push(&m + &step);
        cov.push(cov[i].clone());
    }
    if w.len() > j {
        let mut order: Vec<usize> = (0..w.len()).collect();
        order.sort_by(|a, b| w[*b].total_cmp(&w[*a]).then(a.cmp(b)));
        order.truncate(j);
        order.sort_unstable();
        let total: f64 = order.iter().map(|&i| w[i]).sum();
        w = order.iter().map(|&i| w[i] / total).collect();
        mu = order.iter().map(|&i| mu[i].clone()).collect();
        cov = order.iter().map(|&i| cov[i].clone()).collect();
    }
    let total: f64 = w.iter().sum();
    let w = w.iter().map(|x| x / total).collect();
    GaussianMixture::new(w, mu, cov).expect("components of a valid mixture")
}

fn weighted_loglik(gmm: &GaussianMixture, particles: &[DVector<f64>], w: &[f64]) -> f64 {
    particles
        .iter()
        .zip(w)
        .filter(|(_, &wi)| wi > 0.0)
        .map(|(z, &wi)| wi * gmm.logpdf(z))
        .sum()
}

/// EM for a `j`-component mixture on the weighted empirical distribution
/// `Σ_m w̃_m δ(z_m)`, starting from `init`.
pub fn weighted_em(
    particles: &[DVector<f64>],
    weights: &[f64],
    j: usize,
    init: &GaussianMixture,
    n_em_iters: usize,
    cov_floor: f64,
) -> Result<EmFit> {
    let m = particles.len();
    if weights.len() != m {
        return Err(MtdsError::dim("EM weights", m, weights.len()));
    }
    if j == 0 || m < j {
        return Err(MtdsError::invalid(
            "J",
            format!("need 1 <= J <= M, got J = {j}, M = {m}"),
        ));
    }
    let k = init.k();
    if particles.iter().any(|z| z.len() != k) {
        return Err(MtdsError::dim(
            "particle",
            k,
            particles.iter().find(|z| z.len() != k).map_or(0, |z| z.len()),
        ));
    }
    let start = expand_components(init, j);
    if ess(weights) < j as f64 {
        let gmm = start.inflated(4.0);
        let trace = vec![weighted_loglik(&gmm, particles, weights)];
        return Ok(EmFit {
            gmm,
            fell_back: true,
            floored: false,
            loglik_trace: trace,
        });
    }
    let active: Vec<usize> = (0..m).filter(|&i| weights[i] > 0.0).collect();
    let mut gmm = start;
    let mut floored = false;
    let mut trace = vec![weighted_loglik(&gmm, particles, weights)];
    let mut resp = vec![0.0; j];
    for _ in 0..n_em_iters {
        let mut n_j = vec![0.0; j];
        let mut s1 = vec![DVector::zeros(k); j];
        let mut resp_all = Vec::with_capacity(active.len());
        for &i in &active {
            let z = &particles[i];
            for c in 0..j {
                let a = gmm.weights()[c];
                resp[c] = if a > 0.0 {
                    a.ln() + gmm.component_logpdf(c, z)
                } else {
                    f64::NEG_INFINITY
                };
            }
            let lse = log_sum_exp(&resp);
            let r: Vec<f64> = resp.iter().map(|l| (l - lse).exp()).collect();
            for c in 0..j {
                let wr = weights[i] * r[c];
                n_j[c] += wr;
                s1[c].axpy(wr, z, 1.0);
            }
            resp_all.push(r);
        }
        let mut means = Vec::with_capacity(j);
        for c in 0..j {
            means.push(if n_j[c] > 0.0 {
                &s1[c] / n_j[c]
            } else {
                gmm.means()[c].clone()
            });
        }
        let mut covs = vec![DMatrix::zeros(k, k); j];
        for (idx, &i) in active.iter().enumerate() {
            for c in 0..j {
                let wr = weights[i] * resp_all[idx][c];
                if wr > 0.0 {
                    let d = &particles[i] - &means[c];
                    covs[c].ger(wr, &d, &d, 1.0);
                }
            }
        }
        let total: f64 = n_j.iter().sum();
        let mut new_w = Vec::with_capacity(j);
        let mut new_cov = Vec::with_capacity(j);
        for c in 0..j {
            if n_j[c] > 1e-300 {
                let (f, raised) = floor_eigenvalues(&(&covs[c] / n_j[c]), cov_floor);
                floored |= raised;
                new_cov.push(f);
                new_w.push(n_j[c] / total);
            } else {
                new_cov.push(gmm.covs()[c].clone());
                new_w.push(0.0);
            }
        }
        gmm = GaussianMixture::new(new_w, means, new_cov)?;
        trace.push(weighted_loglik(&gmm, particles, weights));
    }
    Ok(EmFit {
        gmm,
        fell_back: false,
        floored,
        loglik_trace: trace,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdaIsDiagnostics {
    /// Sampling-stage ESS of every adaptation.
    pub ess_trace: Vec<f64>,
    /// The ESS threshold was met.
    pub reached: bool,
    pub em_fallbacks: usize,
    pub em_floored: usize,
}

#[derive(Debug, Clone)]
pub struct AdaIsFit {
    pub gmm: GaussianMixture,
    pub diagnostics: AdaIsDiagnostics,
    /// The last weighted sample drawn.
    pub sample: WeightedSample,
}

/// Draws `m` particles from `q` with pseudo- or quasi-random numbers.
pub fn draw_particles<R: Rng + ?Sized>(
    q: &GaussianMixture,
    m: usize,
    quasi_random: bool,
    rng: &mut R,
) -> Vec<DVector<f64>> {
    let k = q.k();
    if quasi_random {
        let mut seq = ScrambledSobol::new(k + 1, rng);
        (0..m)
            .map(|_| {
                let (u, eps) = seq.next_uniform_and_normals();
                q.transform(u, &DVector::from_vec(eps))
            })
            .collect()
    } else {
        (0..m)
            .map(|_| {
                let u: f64 = rng.random();
                let eps = DVector::from_fn(k, |_, _| rng.sample(StandardNormal));
                q.transform(u, &eps)
            })
            .collect()
    }
}

/// Adapts a mixture proposal toward `exp(target_logpdf)` (unnormalized),
/// seeded from `cfg.seed`.
pub fn adais_fit<F>(target_logpdf: F, q0: &GaussianMixture, cfg: &AdaIsConfig) -> Result<AdaIsFit>
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    adais_fit_with_rng(target_logpdf, q0, cfg, &mut rng)
}

/// [`adais_fit`] drawing from a caller-owned generator.
pub fn adais_fit_with_rng<F, R>(
    target_logpdf: F,
    q0: &GaussianMixture,
    cfg: &AdaIsConfig,
    rng: &mut R,
) -> Result<AdaIsFit>
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let mut q = q0.clone();
    let mut diag = AdaIsDiagnostics::default();
    let mut last = None;
    for _ in 0..cfg.n_adais {
        let particles = draw_particles(&q, cfg.m, cfg.quasi_random, rng);
        let log_w: Vec<f64> = particles.par_iter().map(|z| target_logpdf(z) - q.logpdf(z)).collect();
        let sample = WeightedSample::from_log_weights(particles, log_w)?;
        let e = sample.ess();
        diag.ess_trace.push(e);
        let fit = weighted_em(
            &sample.particles,
            &sample.normalized_weights,
            cfg.j,
            &q,
            cfg.n_em_iters,
            cfg.cov_floor,
        )?;
        diag.em_fallbacks += fit.fell_back as usize;
        diag.em_floored += fit.floored as usize;
        q = fit.gmm;
        last = Some(sample);
        if e >= cfg.m_ess {
            diag.reached = true;
            break;
        }
    }
    Ok(AdaIsFit {
        gmm: q,
        diagnostics: diag,
        sample: last.expect("at least one adaptation"),
    })
}
