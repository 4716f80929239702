use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{pooled_alpha_filter, pooled_fit, single_task_fit, OffsetPrior, PooledFit, SingleTaskConfig};
use crate::adais::{filter_times, posterior_predictive, sequential_filter_at, AdaIsConfig};
use crate::error::{MtdsError, Result};
use crate::generator::ParamGenerator;
use crate::learning::{train, TrainConfig};
use crate::models::{BaseModel, NoisePrecision};
use crate::types::{SequenceDataset, SequenceRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub fold: usize,
    pub seq_id: String,
    pub anchor: usize,
    pub horizon: usize,
    pub channel: usize,
    pub rmse: f64,
    pub srmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedWindow {
    pub seq_id: String,
    pub anchor: usize,
    pub horizon: usize,
}

/// Per-sequence, per-window, per-channel RMSE.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Windows that run past the end of their record.
    pub skipped: Vec<SkippedWindow>,
}

/// Forecast issued after observing `anchor` steps; row `i` predicts step
/// `anchor + i` (0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorForecast {
    pub anchor: usize,
    pub mean: DMatrix<f64>,
}

/// RMSE over the observed entries of rows `anchor..anchor + h` for each
/// anchor and horizon. Channels without observations in a window get no
/// row.
pub fn windowed_rmse(
    fold: usize,
    record: &SequenceRecord,
    forecasts: &[AnchorForecast],
    horizons: &[usize],
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for f in forecasts {
        if f.mean.ncols() != record.n_y() {
            return Err(MtdsError::dim("forecast channels", record.n_y(), f.mean.ncols()));
        }
        for &h in horizons {
            if f.anchor + h > record.len() {
                report.skipped.push(SkippedWindow {
                    seq_id: record.seq_id.clone(),
                    anchor: f.anchor,
                    horizon: h,
                });
                continue;
            }
            if f.mean.nrows() < h {
                return Err(MtdsError::dim("forecast horizon", h, f.mean.nrows()));
            }
            for j in 0..record.n_y() {
                let (mut sse, mut n) = (0.0, 0usize);
                for i in 0..h {
                    let t = f.anchor + i;
                    if record.mask[(t, j)] {
                        sse += (f.mean[(i, j)] - record.y[(t, j)]).powi(2);
                        n += 1;
                    }
                }
                if n > 0 {
                    report.rows.push(EvalRow {
                        fold,
                        seq_id: record.seq_id.clone(),
                        anchor: f.anchor,
                        horizon: h,
                        channel: j,
                        rmse: (sse / n as f64).sqrt(),
                        srmse: None,
                    });
                }
            }
        }
    }
    Ok(report)
}

impl EvalReport {
    pub fn extend(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
        self.skipped.extend(other.skipped);
    }

    /// Mean over sequences of the channel-averaged RMSE, every sequence
    /// weighted equally.
    pub fn aggregate(&self, anchor: usize, horizon: usize) -> Option<f64> {
        self.aggregate_by(anchor, horizon, None, |r| Some(r.rmse))
    }

    /// As [`Self::aggregate`] for one channel.
    pub fn aggregate_channel(&self, anchor: usize, horizon: usize, channel: usize) -> Option<f64> {
        self.aggregate_by(anchor, horizon, Some(channel), |r| Some(r.rmse))
    }

    pub fn aggregate_srmse(&self, anchor: usize, horizon: usize) -> Option<f64> {
        self.aggregate_by(anchor, horizon, None, |r| r.srmse)
    }

    fn aggregate_by(
        &self,
        anchor: usize,
        horizon: usize,
        channel: Option<usize>,
        value: impl Fn(&EvalRow) -> Option<f64>,
    ) -> Option<f64> {
        let mut per_seq: BTreeMap<(usize, &str), (f64, usize)> = BTreeMap::new();
        for r in &self.rows {
            if r.anchor != anchor || r.horizon != horizon || channel.is_some_and(|c| c != r.channel) {
                continue;
            }
            if let Some(v) = value(r) {
                let e = per_seq.entry((r.fold, r.seq_id.as_str())).or_default();
                e.0 += v;
                e.1 += 1;
            }
        }
        if per_seq.is_empty() {
            return None;
        }
        let n = per_seq.len() as f64;
        Some(per_seq.values().map(|(s, c)| s / *c as f64).sum::<f64>() / n)
    }

    /// Fills `srmse = rmse / optimal rmse` for rows with a matching
    /// `(seq_id, anchor, horizon, channel)` in `optimal`.
    pub fn set_srmse(&mut self, optimal: &EvalReport) {
        let denom: BTreeMap<(&str, usize, usize, usize), f64> = optimal
            .rows
            .iter()
            .map(|r| ((r.seq_id.as_str(), r.anchor, r.horizon, r.channel), r.rmse))
            .collect();
        for r in &mut self.rows {
            r.srmse = denom
                .get(&(r.seq_id.as_str(), r.anchor, r.horizon, r.channel))
                .map(|d| r.rmse / d);
        }
    }

    fn has_srmse(&self) -> bool {
        self.rows.iter().any(|r| r.srmse.is_some())
    }

    /// `fold,seq_id,anchor,horizon,channel,rmse` plus `srmse` when any row
    /// has one (empty where missing).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let with_srmse = self.has_srmse();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["fold", "seq_id", "anchor", "horizon", "channel", "rmse"];
        if with_srmse {
            header.push("srmse");
        }
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![
                r.fold.to_string(),
                r.seq_id.clone(),
                r.anchor.to_string(),
                r.horizon.to_string(),
                r.channel.to_string(),
                r.rmse.to_string(),
            ];
            if with_srmse {
                rec.push(r.srmse.map(|v| v.to_string()).unwrap_or_default());
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads what [`Self::write_csv`] writes. Skipped windows are not stored.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(input);
        let header = rd.headers().map_err(csv_err)?.clone();
        let expected = ["fold", "seq_id", "anchor", "horizon", "channel", "rmse"];
        let with_srmse = header.len() == 7 && header.get(6) == Some("srmse");
        if header.iter().take(6).ne(expected) || !(header.len() == 6 || with_srmse) {
            let got = header.iter().collect::<Vec<_>>().join(",");
            return Err(MtdsError::parse(INPUT, 1, format!("unexpected header `{got}`")));
        }
        let mut rows = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(csv_err)?;
            let field = |k: usize| rec.get(k).unwrap_or("");
            let parse_usize = |k: usize| {
                field(k)
                    .parse::<usize>()
                    .map_err(|_| MtdsError::parse(INPUT, line, format!("`{}` is not a non-negative integer", field(k))))
            };
            let parse_f64 = |k: usize| {
                field(k)
                    .parse::<f64>()
                    .map_err(|_| MtdsError::parse(INPUT, line, format!("`{}` is not a number", field(k))))
            };
            rows.push(EvalRow {
                fold: parse_usize(0)?,
                seq_id: field(1).to_string(),
                anchor: parse_usize(2)?,
                horizon: parse_usize(3)?,
                channel: parse_usize(4)?,
                rmse: parse_f64(5)?,
                srmse: if with_srmse && !field(6).is_empty() {
                    Some(parse_f64(6)?)
                } else {
                    None
                },
            });
        }
        Ok(EvalReport {
            rows,
            skipped: Vec::new(),
        })
    }
}

/// Path label for errors from readers without a file name.
const INPUT: &str = "<input>";

pub(crate) fn csv_err(e: csv::Error) -> MtdsError {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => MtdsError::Io(io),
        kind => MtdsError::parse(INPUT, line, format!("{kind:?}")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Mtds,
    Pooled,
    PooledAlpha,
    SingleTask,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Mtds => "mtds",
            Method::Pooled => "pooled",
            Method::PooledAlpha => "pooled-alpha",
            Method::SingleTask => "single-task",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        [Method::Mtds, Method::Pooled, Method::PooledAlpha, Method::SingleTask]
            .into_iter()
            .find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone)]
pub struct LooConfig {
    pub model: BaseModel,
    pub k: usize,
    pub methods: Vec<Method>,
    pub train: TrainConfig,
    pub adais: AdaIsConfig,
    pub single_task: SingleTaskConfig,
    pub anchors: Vec<usize>,
    pub horizons: Vec<usize>,
    /// Draws per posterior-predictive forecast.
    pub n_forecast_samples: usize,
    /// Also report RMSE relative to a per-sequence single-task fit of the
    /// whole held-out sequence.
    pub srmse: bool,
    /// Seed shared by every fold.
    pub seed: u64,
}

impl LooConfig {
    pub fn new(model: BaseModel, k: usize, methods: Vec<Method>) -> Self {
        LooConfig {
            model,
            k,
            methods,
            train: TrainConfig::default(),
            adais: AdaIsConfig::default(),
            single_task: SingleTaskConfig::default(),
            anchors: Vec::new(),
            horizons: Vec::new(),
            n_forecast_samples: 200,
            srmse: false,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.anchors.is_empty() || self.horizons.is_empty() {
            return Err(MtdsError::invalid(
                "loo",
                "methods, anchors and horizons must be non-empty",
            ));
        }
        if self.n_forecast_samples == 0 {
            return Err(MtdsError::invalid("loo", "n_forecast_samples must be at least 1"));
        }
        self.train.validate()?;
        self.adais.validate()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LooReport {
    pub reports: BTreeMap<Method, EvalReport>,
}

impl LooReport {
    pub fn aggregate(&self, method: Method, anchor: usize, horizon: usize) -> Option<f64> {
        self.reports.get(&method)?.aggregate(anchor, horizon)
    }
}

/// Filters `record` once over the thinned grid up to the last anchor plus
/// the anchors themselves, then forecasts up to `h_max` steps (clipped at
/// the end of the record) from each anchor. Anchors must be sorted,
/// distinct and below the record length.
#[allow(clippy::too_many_arguments)]
pub fn mtds_anchor_forecasts<R: Rng + ?Sized>(
    record: &SequenceRecord,
    anchors: &[usize],
    h_max: usize,
    gen: &ParamGenerator,
    shared: &[f64],
    nu: &NoisePrecision,
    model: &BaseModel,
    adais: &AdaIsConfig,
    n_samples: usize,
    rng: &mut R,
) -> Result<Vec<AnchorForecast>> {
    let t_len = record.len();
    if anchors.windows(2).any(|w| w[0] >= w[1]) || anchors.last().is_some_and(|&a| a >= t_len) {
        return Err(MtdsError::invalid(
            "anchors",
            "must be increasing and inside the record",
        ));
    }
    let mut times: Vec<usize> = filter_times(anchors.last().copied().unwrap_or(0), adais.thin);
    times.extend(anchors.iter().copied());
    times.sort_unstable();
    times.dedup();
    let steps = sequential_filter_at(record, &times, gen, shared, nu, model, adais, rng)?;
    let mut fc = Vec::with_capacity(anchors.len());
    for &a in anchors {
        let q = &steps.iter().find(|s| s.t == a).expect("anchor is a filter time").gmm;
        let u_future = record.u.rows(a, h_max.min(t_len - a)).into_owned();
        let f = posterior_predictive(q, &record.prefix(a), &u_future, gen, shared, nu, model, n_samples, rng)?;
        fc.push(AnchorForecast {
            anchor: a,
            mean: f.mean,
        });
    }
    Ok(fc)
}

/// Trains on all sequences but `fold`, then filters, forecasts and scores
/// the held-out one with every configured method.
pub fn run_fold(dataset: &SequenceDataset, fold: usize, cfg: &LooConfig) -> Result<BTreeMap<Method, EvalReport>> {
    cfg.validate()?;
    if fold >= dataset.len() {
        return Err(MtdsError::invalid("fold", format!("{fold} out of range")));
    }
    fold_inner(dataset, fold, cfg).map_err(|e| e.in_fold(fold))
}

fn fold_inner(dataset: &SequenceDataset, fold: usize, cfg: &LooConfig) -> Result<BTreeMap<Method, EvalReport>> {
    let train_set = dataset.without(fold);
    let held = &dataset.sequences[fold];
    let t_len = held.len();
    let h_max = *cfg.horizons.iter().max().expect("validated");
    let mut anchors: Vec<usize> = cfg.anchors.iter().copied().filter(|&a| a < t_len).collect();
    anchors.sort_unstable();
    anchors.dedup();
    let future = |a: usize| held.u.rows(a, h_max.min(t_len - a)).into_owned();
    let train_cfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };

    let wants = |m: Method| cfg.methods.contains(&m);
    let needs_pooled = wants(Method::Pooled)
        || wants(Method::PooledAlpha)
        || (cfg.srmse && !wants(Method::Mtds))
        || (wants(Method::SingleTask) && !wants(Method::Mtds));
    let pooled: Option<PooledFit> = if needs_pooled {
        Some(pooled_fit(&train_set, &cfg.model, &train_cfg)?)
    } else {
        None
    };
    let mut nu_for_single: Option<NoisePrecision> = pooled.as_ref().map(|p| p.nu.clone());
    let mut forecasts: BTreeMap<Method, Vec<AnchorForecast>> = BTreeMap::new();

    if wants(Method::Mtds) {
        let out = train(&train_set, &cfg.model, cfg.k, &train_cfg)?;
        let state = out.state;
        let nu = state.nu()?;
        nu_for_single = Some(nu.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        let fc = mtds_anchor_forecasts(
            held,
            &anchors,
            h_max,
            &state.gen,
            &state.shared,
            &nu,
            &cfg.model,
            &cfg.adais,
            cfg.n_forecast_samples,
            &mut rng,
        )?;
        forecasts.insert(Method::Mtds, fc);
    }

    if let Some(p) = &pooled {
        if wants(Method::Pooled) {
            let sim = p.simulate(&held.u)?;
            let fc = anchors
                .iter()
                .map(|&a| AnchorForecast {
                    anchor: a,
                    mean: sim.rows(a, h_max.min(t_len - a)).into_owned(),
                })
                .collect();
            forecasts.insert(Method::Pooled, fc);
        }
        if wants(Method::PooledAlpha) {
            let prior = OffsetPrior::from_pooled(p, &train_set)?;
            let fc = anchors
                .iter()
                .map(|&a| {
                    let out = pooled_alpha_filter(p, &held.prefix(a), &future(a), &prior)?;
                    Ok(AnchorForecast {
                        anchor: a,
                        mean: out.mean,
                    })
                })
                .collect::<Result<_>>()?;
            forecasts.insert(Method::PooledAlpha, fc);
        }
    }

    let st_nu = nu_for_single.unwrap_or_else(|| NoisePrecision::uniform(cfg.model.n_y(), 1.0).expect("positive"));
    let shared: Vec<f64> = Vec::new();
    if wants(Method::SingleTask) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
        let fc = anchors
            .iter()
            .map(|&a| {
                let prefix = held.prefix(a);
                let fit = single_task_fit(&prefix, &cfg.model, &shared, &st_nu, &cfg.single_task)?;
                let f = posterior_predictive(
                    &fit.posterior,
                    &prefix,
                    &future(a),
                    &fit.generator,
                    &shared,
                    &st_nu,
                    &cfg.model,
                    cfg.n_forecast_samples,
                    &mut rng,
                )?;
                Ok(AnchorForecast {
                    anchor: a,
                    mean: f.mean,
                })
            })
            .collect::<Result<_>>()?;
        forecasts.insert(Method::SingleTask, fc);
    }

    let optimal = if cfg.srmse {
        let fit = single_task_fit(held, &cfg.model, &shared, &st_nu, &cfg.single_task)?;
        let sim = cfg.model.simulate(&shared, fit.mean_theta.as_slice(), &held.u)?;
        let fc: Vec<AnchorForecast> = anchors
            .iter()
            .map(|&a| AnchorForecast {
                anchor: a,
                mean: sim.rows(a, h_max.min(t_len - a)).into_owned(),
            })
            .collect();
        Some(windowed_rmse(fold, held, &fc, &cfg.horizons)?)
    } else {
        None
    };

    let mut out = BTreeMap::new();
    for (m, fc) in forecasts {
        let mut rep = windowed_rmse(fold, held, &fc, &cfg.horizons)?;
        for &a in cfg.anchors.iter().filter(|&&a| a >= t_len) {
            for &h in &cfg.horizons {
                rep.skipped.push(SkippedWindow {
                    seq_id: held.seq_id.clone(),
                    anchor: a,
                    horizon: h,
                });
            }
        }
        if let Some(opt) = &optimal {
            rep.set_srmse(opt);
        }
        out.insert(m, rep);
    }
    Ok(out)
}

/// Leave-one-out evaluation. Folds run in parallel and are merged in fold
/// order, so the result does not depend on scheduling.
pub fn loo_driver(dataset: &SequenceDataset, cfg: &LooConfig) -> Result<LooReport> {
    if dataset.len() < 2 {
        return Err(MtdsError::Dataset("leave-one-out needs at least two sequences".into()));
    }
    cfg.validate()?;
    let folds: Vec<BTreeMap<Method, EvalReport>> = (0..dataset.len())
        .into_par_iter()
        .map(|i| run_fold(dataset, i, cfg))
        .collect::<Result<_>>()?;
    let mut report = LooReport::default();
    for fold in folds {
        for (m, rep) in fold {
            report.reports.entry(m).or_default().extend(rep);
        }
    }
    Ok(report)
}
