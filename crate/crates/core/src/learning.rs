//! Variational learning of the parameter generator, shared parameters,
//! noise precisions and per-sequence posteriors by stochastic ascent on
//! the summed evidence lower bound.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{MtdsError, Result};
use crate::generator::ParamGenerator;
use crate::gradients::{loglik_and_grad, loglik_theta};
use crate::models::{BaseModel, NoisePrecision};
use crate::numeric::log_sum_exp;
use crate::types::{LatentCode, SequenceDataset, SequenceRecord};
use crate::variational::VariationalPosterior;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub n_iters: usize,
    pub batch_size: usize,
    /// Rate for shared parameters and log-precisions.
    pub lr_main: f64,
    /// Rate for the generator and the variational parameters.
    pub lr_mt: f64,
    pub kl_warmup_iters: usize,
    pub n_mc_samples: usize,
    pub l2_main: f64,
    pub l2_mt: f64,
    pub seed: u64,
    /// Train on consecutive segments of this length instead of whole sequences.
    pub segment_len: Option<usize>,
    /// Rows of `W` held at zero.
    pub frozen_rows: Vec<usize>,
    /// Hold all of `W` and every posterior fixed (pooled training).
    pub freeze_loadings: bool,
    /// Iterations between posterior-scale diagnostics.
    pub log_interval: usize,
    /// Record elapsed time in the training log (otherwise zero).
    pub log_wallclock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_iters: 2000,
            batch_size: 16,
            lr_main: 1e-3,
            lr_mt: 3e-2,
            kl_warmup_iters: 400,
            n_mc_samples: 1,
            l2_main: 0.0,
            l2_mt: 0.0,
            seed: 0,
            segment_len: None,
            frozen_rows: Vec::new(),
            freeze_loadings: false,
            log_interval: 100,
            log_wallclock: false,
        }
    }
}

impl TrainConfig {
    /// Default configuration with the warmup at 20% of `n_iters`.
    pub fn with_iters(n_iters: usize) -> Self {
        TrainConfig {
            n_iters,
            kl_warmup_iters: (n_iters / 5).max(1),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_iters == 0 || self.batch_size == 0 || self.n_mc_samples == 0 {
            return Err(MtdsError::invalid("train", "counts must be at least 1"));
        }
        if !(self.lr_main > 0.0 && self.lr_mt > 0.0) {
            return Err(MtdsError::invalid("train", "learning rates must be positive"));
        }
        if !(self.l2_main >= 0.0 && self.l2_mt >= 0.0) {
            return Err(MtdsError::invalid("train", "l2 must be non-negative"));
        }
        if self.segment_len == Some(0) || self.log_interval == 0 {
            return Err(MtdsError::invalid(
                "train",
                "segment_len and log_interval must be at least 1",
            ));
        }
        Ok(())
    }

    /// `min(1, iter / kl_warmup_iters)`.
    pub fn kl_weight(&self, iter: usize) -> f64 {
        if self.kl_warmup_iters == 0 {
            1.0
        } else {
            (iter as f64 / self.kl_warmup_iters as f64).min(1.0)
        }
    }
}

/// First and second moment estimates for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamMoments {
    pub fn zeros(n: usize) -> Self {
        AdamMoments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One Adam step descending `grads`, with decoupled weight decay `l2`.
/// `iter` counts steps from 1 and drives the bias correction.
pub fn adam_step(params: &mut [f64], grads: &[f64], moments: &mut AdamMoments, lr: f64, l2: f64, iter: usize) {
    debug_assert_eq!(params.len(), grads.len());
    let t = iter.max(1) as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        moments.m[i] = ADAM_BETA1 * moments.m[i] + (1.0 - ADAM_BETA1) * g;
        moments.v[i] = ADAM_BETA2 * moments.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = moments.m[i] / c1;
        let v_hat = moments.v[i] / c2;
        params[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + l2 * params[i]);
    }
}

/// Gradients of the ELBO (ascent direction).
#[derive(Debug, Clone)]
pub struct ElboGradient {
    pub d_w: DMatrix<f64>,
    pub d_b: DVector<f64>,
    pub d_shared: Vec<f64>,
    pub d_lognu: DVector<f64>,
    pub d_mu: DVector<f64>,
    pub d_log_s: DVector<f64>,
}

impl ElboGradient {
    fn is_finite(&self) -> bool {
        self.d_w.iter().all(|v| v.is_finite())
            && self.d_b.iter().all(|v| v.is_finite())
            && self.d_shared.iter().all(|v| v.is_finite())
            && self.d_lognu.iter().all(|v| v.is_finite())
            && self.d_mu.iter().all(|v| v.is_finite())
            && self.d_log_s.iter().all(|v| v.is_finite())
    }
}

/// ELBO of one record with the reparameterization noise supplied:
/// `(1/S) Σ_s log p(Y | U, h(μ + s ⊙ ε_s)) − kl_weight · KL(q ‖ N(0, I))`.
#[allow(clippy::too_many_arguments)]
pub fn elbo_with_noise(
    model: &BaseModel,
    shared: &[f64],
    gen: &ParamGenerator,
    nu: &NoisePrecision,
    q: &VariationalPosterior,
    record: &SequenceRecord,
    kl_weight: f64,
    eps: &[DVector<f64>],
) -> Result<(f64, ElboGradient)> {
    if eps.is_empty() {
        return Err(MtdsError::invalid("n_samples", "at least one draw is required"));
    }
    let k = gen.k();
    let (d, n_y) = (gen.d(), model.n_y());
    let mut acc = ElboGradient {
        d_w: DMatrix::zeros(d, k),
        d_b: DVector::zeros(d),
        d_shared: vec![0.0; shared.len()],
        d_lognu: DVector::zeros(n_y),
        d_mu: DVector::zeros(k),
        d_log_s: DVector::zeros(k),
    };
    let s = q.std();
    let mut value = 0.0;
    let scale = 1.0 / eps.len() as f64;
    for e in eps {
        let z = q.reparameterize(e)?;
        let g = loglik_and_grad(model, shared, gen, &z, record, nu)?;
        value += scale * g.value;
        acc.d_w += scale * g.d_w;
        acc.d_b += scale * g.d_b;
        for (a, b) in acc.d_shared.iter_mut().zip(&g.d_shared) {
            *a += scale * b;
        }
        acc.d_lognu += scale * g.d_lognu;
        acc.d_mu += scale * &g.d_z;
        acc.d_log_s += scale * g.d_z.component_mul(&s).component_mul(e);
    }
    let (kl_mu, kl_ls) = q.kl_grad();
    value -= kl_weight * q.kl_to_standard();
    acc.d_mu -= kl_weight * kl_mu;
    acc.d_log_s -= kl_weight * kl_ls;
    Ok((value, acc))
}

fn draw_noise<R: Rng + ?Sized>(k: usize, n: usize, rng: &mut R) -> Vec<DVector<f64>> {
    (0..n)
        .map(|_| DVector::from_fn(k, |_, _| rng.sample(StandardNormal)))
        .collect()
}

/// Trainable state: generator, shared parameters, log-precisions and one
/// posterior per training sequence, with optimizer moments.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: BaseModel,
    pub gen: ParamGenerator,
    pub shared: Vec<f64>,
    pub log_nu: DVector<f64>,
    pub posteriors: BTreeMap<String, VariationalPosterior>,
    pub iter: usize,
    adam_w: AdamMoments,
    adam_b: AdamMoments,
    adam_shared: AdamMoments,
    adam_nu: AdamMoments,
    adam_q: BTreeMap<String, (AdamMoments, usize)>,
    rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh state: `b` from the model's default θ at the data's channel
    /// means, small random loadings, prior posteriors, `ν` from the data
    /// variance.
    pub fn init(dataset: &SequenceDataset, model: &BaseModel, k: usize, seed: u64) -> Result<Self> {
        check_dataset(dataset, model)?;
        if k == 0 {
            return Err(MtdsError::invalid("k", "latent dimension must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let moments = dataset.channel_moments();
        let means: Vec<f64> = moments.iter().map(|m| m.0).collect();
        let b = model.constraints().inverse(model.default_theta(&means).as_slice())?;
        let w = DMatrix::from_fn(model.n_params(), k, |_, _| 0.01 * rng.sample::<f64, _>(StandardNormal));
        let gen = ParamGenerator::new(w, b, model.constraints())?;
        let shared = model.init_shared(&mut rng);
        let log_nu = DVector::from_iterator(moments.len(), moments.iter().map(|m| -(m.1.max(1e-8)).ln()));
        Self::from_parts(dataset, model, gen, shared, log_nu, rng)
    }

    /// State with the given parameters and prior posteriors.
    pub fn with_params(
        dataset: &SequenceDataset,
        model: &BaseModel,
        gen: ParamGenerator,
        shared: Vec<f64>,
        log_nu: DVector<f64>,
        seed: u64,
    ) -> Result<Self> {
        check_dataset(dataset, model)?;
        Self::from_parts(dataset, model, gen, shared, log_nu, ChaCha8Rng::seed_from_u64(seed))
    }

    fn from_parts(
        dataset: &SequenceDataset,
        model: &BaseModel,
        gen: ParamGenerator,
        shared: Vec<f64>,
        log_nu: DVector<f64>,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        if gen.d() != model.n_params() {
            return Err(MtdsError::dim("generator output", model.n_params(), gen.d()));
        }
        if shared.len() != model.n_shared() {
            return Err(MtdsError::dim("shared parameters", model.n_shared(), shared.len()));
        }
        if log_nu.len() != model.n_y() {
            return Err(MtdsError::dim("log_nu", model.n_y(), log_nu.len()));
        }
        let k = gen.k();
        let posteriors = dataset
            .sequences
            .iter()
            .map(|r| (r.seq_id.clone(), VariationalPosterior::prior(k)))
            .collect();
        let adam_q = dataset
            .sequences
            .iter()
            .map(|r| (r.seq_id.clone(), (AdamMoments::zeros(2 * k), 0)))
            .collect();
        Ok(TrainState {
            model: model.clone(),
            adam_w: AdamMoments::zeros(gen.d() * k),
            adam_b: AdamMoments::zeros(gen.d()),
            adam_shared: AdamMoments::zeros(shared.len()),
            adam_nu: AdamMoments::zeros(log_nu.len()),
            gen,
            shared,
            log_nu,
            posteriors,
            iter: 0,
            adam_q,
            rng,
        })
    }

    pub fn k(&self) -> usize {
        self.gen.k()
    }

    pub fn nu(&self) -> Result<NoisePrecision> {
        NoisePrecision::from_log(&self.log_nu)
    }

    pub fn posterior(&self, seq_id: &str) -> Option<&VariationalPosterior> {
        self.posteriors.get(seq_id)
    }
}

fn check_dataset(dataset: &SequenceDataset, model: &BaseModel) -> Result<()> {
    if dataset.is_empty() {
        return Err(MtdsError::Dataset("no sequences".into()));
    }
    if dataset.n_u != model.n_u() {
        return Err(MtdsError::dim("dataset inputs", model.n_u(), dataset.n_u));
    }
    if dataset.n_y != model.n_y() {
        return Err(MtdsError::dim("dataset outputs", model.n_y(), dataset.n_y));
    }
    Ok(())
}

/// Reparameterized ELBO estimate for a record in the state's dataset.
pub fn elbo_estimate<R: Rng + ?Sized>(
    state: &TrainState,
    record: &SequenceRecord,
    kl_weight: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<(f64, ElboGradient)> {
    let q = state
        .posterior(&record.seq_id)
        .ok_or_else(|| MtdsError::invalid("record", format!("no posterior for `{}`", record.seq_id)))?;
    let eps = draw_noise(state.k(), n_samples, rng);
    elbo_with_noise(
        &state.model,
        &state.shared,
        &state.gen,
        &state.nu()?,
        q,
        record,
        kl_weight,
        &eps,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogRow {
    pub iter: usize,
    /// Mean per-sequence ELBO over the minibatch.
    pub elbo: f64,
    pub kl_weight: f64,
    pub wallclock_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<TrainLogRow>,
}

/// Trains from a fresh state.
pub fn train(dataset: &SequenceDataset, model: &BaseModel, k: usize, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = prepare(dataset, cfg);
    let state = TrainState::init(&data, model, k, cfg.seed)?;
    train_from(state, &data, cfg)
}

fn prepare(dataset: &SequenceDataset, cfg: &TrainConfig) -> SequenceDataset {
    match cfg.segment_len {
        Some(len) => dataset.segmented(len),
        None => dataset.clone(),
    }
}

/// Continues training `state` for `cfg.n_iters` iterations. The dataset
/// must be the one (after segmentation) the state was built for.
pub fn train_from(mut state: TrainState, dataset: &SequenceDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = dataset.len();
    if dataset
        .sequences
        .iter()
        .any(|r| !state.posteriors.contains_key(&r.seq_id))
    {
        return Err(MtdsError::Dataset("state posteriors do not match the dataset".into()));
    }
    for &r in &cfg.frozen_rows {
        if r >= state.gen.d() {
            return Err(MtdsError::invalid("frozen_rows", format!("row {r} out of range")));
        }
        state.gen.w.row_mut(r).fill(0.0);
    }
    if cfg.freeze_loadings {
        state.gen.w.fill(0.0);
    }
    let batch = cfg.batch_size.min(n);
    let scale = n as f64 / batch as f64;
    let started = Instant::now();
    let mut log = Vec::with_capacity(cfg.n_iters);
    let (d, k) = (state.gen.d(), state.k());

    for _ in 0..cfg.n_iters {
        state.iter += 1;
        let it = state.iter;
        let kl_weight = cfg.kl_weight(it);
        let mut idx = index::sample(&mut state.rng, n, batch).into_vec();
        idx.sort_unstable();
        let seeds: Vec<u64> = idx.iter().map(|_| state.rng.random()).collect();
        let snapshot = &state;
        let results: Vec<Result<(f64, ElboGradient)>> = idx
            .par_iter()
            .zip(seeds.par_iter())
            .map(|(&i, &seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                elbo_estimate(snapshot, &dataset.sequences[i], kl_weight, cfg.n_mc_samples, &mut rng)
            })
            .collect();

        let mut g_w = DMatrix::zeros(d, k);
        let mut g_b = DVector::zeros(d);
        let mut g_shared = vec![0.0; state.shared.len()];
        let mut g_nu = DVector::zeros(state.log_nu.len());
        let mut elbo_sum = 0.0;
        let mut per_seq = Vec::with_capacity(batch);
        for (&i, res) in idx.iter().zip(results) {
            let seq_id = &dataset.sequences[i].seq_id;
            let non_finite = || MtdsError::NonFiniteObjective {
                iter: it,
                seq_id: seq_id.clone(),
            };
            let (v, g) = res.map_err(|e| if e.is_numerical() { e } else { non_finite() })?;
            if !v.is_finite() || !g.is_finite() {
                return Err(non_finite());
            }
            elbo_sum += v;
            g_w += &g.d_w;
            g_b += &g.d_b;
            for (a, b) in g_shared.iter_mut().zip(&g.d_shared) {
                *a += b;
            }
            g_nu += &g.d_lognu;
            per_seq.push((seq_id.clone(), g.d_mu, g.d_log_s));
        }

        // descent on −ELBO
        if !cfg.freeze_loadings {
            for &r in &cfg.frozen_rows {
                g_w.row_mut(r).fill(0.0);
            }
            let mut w_flat: Vec<f64> = row_major(&state.gen.w);
            let gw: Vec<f64> = row_major(&g_w).iter().map(|v| -scale * v).collect();
            adam_step(&mut w_flat, &gw, &mut state.adam_w, cfg.lr_mt, cfg.l2_mt, it);
            state.gen.w = DMatrix::from_row_slice(d, k, &w_flat);
            for &r in &cfg.frozen_rows {
                state.gen.w.row_mut(r).fill(0.0);
            }
        }
        let gb: Vec<f64> = g_b.iter().map(|v| -scale * v).collect();
        adam_step(state.gen.b.as_mut_slice(), &gb, &mut state.adam_b, cfg.lr_mt, 0.0, it);
        let gs: Vec<f64> = g_shared.iter().map(|v| -scale * v).collect();
        adam_step(
            &mut state.shared,
            &gs,
            &mut state.adam_shared,
            cfg.lr_main,
            cfg.l2_main,
            it,
        );
        let gn: Vec<f64> = g_nu.iter().map(|v| -scale * v).collect();
        adam_step(
            state.log_nu.as_mut_slice(),
            &gn,
            &mut state.adam_nu,
            cfg.lr_main,
            0.0,
            it,
        );

        if !cfg.freeze_loadings {
            for (seq_id, d_mu, d_ls) in per_seq {
                let q = state.posteriors.get_mut(&seq_id).expect("posterior exists");
                let (mom, steps) = state.adam_q.get_mut(&seq_id).expect("moments exist");
                *steps += 1;
                let mut p: Vec<f64> = q.mu.iter().chain(q.log_s.iter()).copied().collect();
                let g: Vec<f64> = d_mu.iter().chain(d_ls.iter()).map(|v| -v).collect();
                adam_step(&mut p, &g, mom, cfg.lr_mt, 0.0, *steps);
                q.mu.copy_from_slice(&p[..k]);
                q.log_s.copy_from_slice(&p[k..]);
            }
        }

        let wallclock_ms = if cfg.log_wallclock {
            started.elapsed().as_millis() as u64
        } else {
            0
        };
        log.push(TrainLogRow {
            iter: it,
            elbo: elbo_sum / batch as f64,
            kl_weight,
            wallclock_ms,
        });
        if it.is_multiple_of(cfg.log_interval) {
            log_posterior_scales(&state, it, elbo_sum / batch as f64);
        }
    }
    Ok(TrainOutcome { state, log })
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        out.extend(m.row(r).iter());
    }
    out
}

/// Mean posterior variance per latent dimension; values near 1 signal an
/// unused dimension.
pub fn posterior_variance_summary(state: &TrainState) -> DVector<f64> {
    let k = state.k();
    let n = state.posteriors.len().max(1) as f64;
    state
        .posteriors
        .values()
        .fold(DVector::zeros(k), |acc, q| acc + q.variance())
        / n
}

fn log_posterior_scales(state: &TrainState, iter: usize, elbo: f64) {
    if log::log_enabled!(log::Level::Info) {
        let v = posterior_variance_summary(state);
        log::info!(
            "iter {iter}: elbo {elbo:.4}, mean posterior variance {:?}",
            v.as_slice()
        );
    }
}

/// Writes `iter,elbo,kl_weight,wallclock_ms` lines with a header.
pub fn write_train_log<W: Write>(mut out: W, rows: &[TrainLogRow]) -> Result<()> {
    writeln!(out, "iter,elbo,kl_weight,wallclock_ms")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.iter, r.elbo, r.kl_weight, r.wallclock_ms)?;
    }
    Ok(())
}

/// Importance-sampled `log p(Y | U)` with its delta-method standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsEstimate {
    pub value: f64,
    pub std_err: f64,
}

/// `log (1/S) Σ_s p(Y | U, h(z_s))` over `S` prior draws.
#[allow(clippy::too_many_arguments)]
pub fn log_marginal_is_estimate<R: Rng + ?Sized>(
    model: &BaseModel,
    record: &SequenceRecord,
    gen: &ParamGenerator,
    shared: &[f64],
    nu: &NoisePrecision,
    n_samples: usize,
    rng: &mut R,
) -> Result<IsEstimate> {
    if n_samples == 0 {
        return Err(MtdsError::invalid("S", "at least one draw is required"));
    }
    let zs = draw_noise(gen.k(), n_samples, rng);
    let lls: Vec<f64> = zs
        .par_iter()
        .map(|z| {
            let theta = gen.apply_vec(z)?;
            loglik_theta(model, shared, theta.as_slice(), record, nu)
        })
        .collect::<Result<_>>()?;
    let lse = log_sum_exp(&lls);
    let s = n_samples as f64;
    let value = lse - s.ln();
    // relative sd of the weights, scaled so that the largest is 1
    let max = lls.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = lls.iter().map(|l| (l - max).exp()).collect();
    let mean = w.iter().sum::<f64>() / s;
    let var = if n_samples > 1 {
        w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (s - 1.0)
    } else {
        0.0
    };
    Ok(IsEstimate {
        value,
        std_err: (var / s).sqrt() / mean,
    })
}

/// ELBO with `kl_weight = 1` averaged over `n_samples` draws, without
/// gradients; convenient for evaluation.
pub fn elbo_value<R: Rng + ?Sized>(
    state: &TrainState,
    record: &SequenceRecord,
    n_samples: usize,
    rng: &mut R,
) -> Result<f64> {
    let q = state
        .posterior(&record.seq_id)
        .ok_or_else(|| MtdsError::invalid("record", format!("no posterior for `{}`", record.seq_id)))?;
    let nu = state.nu()?;
    let eps = draw_noise(state.k(), n_samples, rng);
    let mut acc = 0.0;
    for e in &eps {
        let z: LatentCode = q.reparameterize(e)?;
        let theta = state.gen.apply(&z)?;
        acc += loglik_theta(&state.model, &state.shared, theta.as_slice(), record, &nu)?;
    }
    Ok(acc / n_samples as f64 - q.kl_to_standard())
}
