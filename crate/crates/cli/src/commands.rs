use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use mtds_core::adais::{posterior_predictive, sequential_filter};
use mtds_core::baselines::{loo_driver, mtds_anchor_forecasts, windowed_rmse, EvalReport, SkippedWindow};
use mtds_core::gradients::random_instance_check;
use mtds_core::io::{
    forecast_rows, generate_synthetic, load_posteriors_csv, load_sequences_csv, write_forecast_csv,
    write_posteriors_csv, write_sequences_csv, write_truth_csv, ModelArtifact, RunConfig,
};
use mtds_core::kalman::{equivalence_gap, StochasticLds};
use mtds_core::learning::{train as fit, write_train_log};
use mtds_core::models::{LdsSpec, MtRnnSpec, PdSpec};
use mtds_core::{BaseModel, MtdsError, SequenceDataset, SequenceRecord};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::CliError;

type CmdResult = Result<(), CliError>;

fn out_dir(out: &Option<PathBuf>) -> Result<PathBuf, CliError> {
    let dir = out
        .clone()
        .ok_or_else(|| CliError::Usage("--out <DIR> is required".into()))?;
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn path_or(cfg: &RunConfig, key: &str, fallback: Option<PathBuf>) -> Result<PathBuf, CliError> {
    match cfg.get_opt::<PathBuf>(key)? {
        Some(p) => Ok(p),
        None => fallback.ok_or_else(|| {
            CliError::Core(MtdsError::Config {
                key: key.into(),
                msg: "required but missing".into(),
            })
        }),
    }
}

fn load_data(cfg: &RunConfig) -> Result<SequenceDataset, CliError> {
    Ok(load_sequences_csv(&path_or(cfg, "data.path", None)?)?)
}

fn load_artifact(cfg: &RunConfig, out: &Option<PathBuf>) -> Result<ModelArtifact, CliError> {
    let fallback = out.as_ref().map(|d| d.join("model.txt"));
    Ok(ModelArtifact::load(&path_or(cfg, "model.path", fallback)?)?)
}

/// Model from the config, with unset channel counts taken from the data.
fn model_for(cfg: &RunConfig, data: &SequenceDataset) -> Result<BaseModel, CliError> {
    let mut cfg = cfg.clone();
    if !cfg.contains("model.n_y") {
        cfg.set_override(&format!("model.n_y={}", data.n_y))?;
    }
    if !cfg.contains("model.n_u") && data.n_u > 0 {
        cfg.set_override(&format!("model.n_u={}", data.n_u))?;
    }
    let model = cfg.model()?;
    check_shapes(&model, data)?;
    Ok(model)
}

fn check_shapes(model: &BaseModel, data: &SequenceDataset) -> Result<(), CliError> {
    if model.n_u() != data.n_u || model.n_y() != data.n_y {
        return Err(MtdsError::Dataset(format!(
            "data has {} inputs and {} outputs; the model expects {} and {}",
            data.n_u,
            data.n_y,
            model.n_u(),
            model.n_y()
        ))
        .into());
    }
    Ok(())
}

fn select<'a>(cfg: &RunConfig, data: &'a SequenceDataset) -> Result<&'a SequenceRecord, CliError> {
    match cfg.get_opt::<String>("filter.seq_id")? {
        Some(id) => data.get(&id).ok_or_else(|| {
            CliError::Core(MtdsError::Config {
                key: "filter.seq_id".into(),
                msg: format!("no sequence `{id}` in the data"),
            })
        }),
        None => data
            .sequences
            .first()
            .ok_or_else(|| MtdsError::Dataset("no sequences".into()).into()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn synth(cfg: &RunConfig, out: &Option<PathBuf>) -> CmdResult {
    let dir = out_dir(out)?;
    let spec = cfg.synthetic_spec()?;
    let data = generate_synthetic(&spec, cfg.seed()?)?;
    write_sequences_csv(&dir.join("data.csv"), &data.dataset)?;
    write_truth_csv(&dir.join("truth.csv"), &data.truth_rows())?;
    println!(
        "synth: {} sequences of length {} (k* = {}) -> {}",
        spec.n,
        spec.t,
        spec.k(),
        dir.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Option<PathBuf>) -> CmdResult {
    let dir = out_dir(out)?;
    let data = load_data(cfg)?;
    let model = model_for(cfg, &data)?;
    let k: usize = cfg.require("k")?;
    let tc = cfg.train_config()?;
    info!(
        "training {} with k = {k} on {} sequences",
        model.kind().name(),
        data.len()
    );
    let outcome = fit(&data, &model, k, &tc)?;
    ModelArtifact::from_state(&outcome.state)?.save(&dir.join("model.txt"))?;
    let mut log_file = create(&dir.join("train_log.csv"))?;
    write_train_log(&mut log_file, &outcome.log)?;
    log_file.flush()?;
    if let Some(last) = outcome.log.last() {
        println!("train: iter {} elbo {:.6}", last.iter, last.elbo);
    }
    Ok(())
}

pub fn filter(cfg: &RunConfig, out: &Option<PathBuf>) -> CmdResult {
    let dir = out_dir(out)?;
    let data = load_data(cfg)?;
    let art = load_artifact(cfg, out)?;
    check_shapes(&art.model, &data)?;
    let record = select(cfg, &data)?;
    let adais = cfg.adais_config()?;
    let steps = sequential_filter(record, &art.generator, &art.shared, &art.nu, &art.model, &adais)?;
    let unreached = steps.iter().filter(|s| !s.diagnostics.reached).count();
    if unreached > 0 {
        warn!(
            "{unreached} of {} filter steps stopped below the ESS target",
            steps.len()
        );
    }
    write_posteriors_csv(&dir.join("posteriors.csv"), &steps)?;
    if let Some(last) = steps.last() {
        let ess = last.diagnostics.ess_trace.last().copied().unwrap_or(f64::NAN);
        println!(
            "filter: {} steps for {}, final ESS {:.1}",
            steps.len(),
            record.seq_id,
            ess
        );
    }
    Ok(())
}

pub fn forecast(cfg: &RunConfig, out: &Option<PathBuf>) -> CmdResult {
    let dir = out_dir(out)?;
    let data = load_data(cfg)?;
    let art = load_artifact(cfg, out)?;
    check_shapes(&art.model, &data)?;
    let record = select(cfg, &data)?;
    let posts = load_posteriors_csv(&path_or(cfg, "posteriors.path", Some(dir.join("posteriors.csv")))?)?;
    let anchor = match cfg.get_opt::<usize>("forecast.anchor")? {
        Some(a) => a,
        None => posts
            .iter()
            .map(|(t, _)| *t)
            .filter(|&t| t < record.len())
            .max()
            .ok_or_else(|| MtdsError::Dataset("no filtered posterior before the end of the sequence".into()))?,
    };
    let q = &posts
        .iter()
        .find(|(t, _)| *t == anchor)
        .ok_or_else(|| MtdsError::Config {
            key: "forecast.anchor".into(),
            msg: format!("no filtered posterior at t = {anchor}"),
        })?
        .1;
    if anchor >= record.len() {
        return Err(MtdsError::Config {
            key: "forecast.anchor".into(),
            msg: format!("{} has no inputs after step {anchor}", record.seq_id),
        }
        .into());
    }
    let horizon: usize = cfg.get("forecast.horizon", 20)?;
    let h = horizon.min(record.len() - anchor);
    if h < horizon {
        warn!("horizon clipped to {h} steps by the end of {}", record.seq_id);
    }
    let samples: usize = cfg.get("forecast.samples", 200)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed()?);
    let u_future = record.u.rows(anchor, h).into_owned();
    let fc = posterior_predictive(
        q,
        &record.prefix(anchor),
        &u_future,
        &art.generator,
        &art.shared,
        &art.nu,
        &art.model,
        samples,
        &mut rng,
    )?;
    write_forecast_csv(&dir.join("forecast.csv"), &forecast_rows(&record.seq_id, anchor, &fc))?;
    println!("forecast: {} steps from t = {anchor} for {}", h, record.seq_id);
    Ok(())
}

fn print_summary(
    w: &mut impl Write,
    label: &str,
    rep: &EvalReport,
    anchors: &[usize],
    horizons: &[usize],
) -> std::io::Result<()> {
    for &a in anchors {
        for &h in horizons {
            let rmse = rep.aggregate(a, h).map_or("NA".to_string(), |v| v.to_string());
            let srmse = rep.aggregate_srmse(a, h).map_or(String::new(), |v| format!(",{v}"));
            writeln!(w, "{label}{a},{h},{rmse}{srmse}")?;
        }
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, out: &Option<PathBuf>) -> CmdResult {
    let dir = out_dir(out)?;
    let data = load_data(cfg)?;
    let art = load_artifact(cfg, out)?;
    check_shapes(&art.model, &data)?;
    let anchors: Vec<usize> = required_list(cfg, "eval.anchors")?;
    let horizons: Vec<usize> = required_list(cfg, "eval.horizons")?;
    if horizons.is_empty() || horizons.contains(&0) {
        return Err(CliError::Usage("eval.horizons must be positive".into()));
    }
    let h_max = *horizons.iter().max().expect("non-empty");
    let adais = cfg.adais_config()?;
    let samples: usize = cfg.get("eval.forecast_samples", 200)?;
    let seed = cfg.seed()?;

    let mut report = EvalReport::default();
    for (i, rec) in data.sequences.iter().enumerate() {
        let mut own: Vec<usize> = anchors.iter().copied().filter(|&a| a < rec.len()).collect();
        own.sort_unstable();
        own.dedup();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let fc = mtds_anchor_forecasts(
            rec,
            &own,
            h_max,
            &art.generator,
            &art.shared,
            &art.nu,
            &art.model,
            &adais,
            samples,
            &mut rng,
        )
        .map_err(|e| e.in_fold(i))?;
        let mut rep = windowed_rmse(i, rec, &fc, &horizons)?;
        for &a in anchors.iter().filter(|&&a| a >= rec.len()) {
            for &h in &horizons {
                rep.skipped.push(SkippedWindow {
                    seq_id: rec.seq_id.clone(),
                    anchor: a,
                    horizon: h,
                });
            }
        }
        report.extend(rep);
    }
    let mut f = create(&dir.join("eval.csv"))?;
    report.write_csv(&mut f)?;
    f.flush()?;
    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    writeln!(w, "anchor,horizon,rmse")?;
    print_summary(&mut w, "", &report, &anchors, &horizons)?;
    if !report.skipped.is_empty() {
        warn!(
            "{} windows extend past the end of their sequence and were skipped",
            report.skipped.len()
        );
    }
    Ok(())
}

fn required_list(cfg: &RunConfig, key: &str) -> Result<Vec<usize>, CliError> {
    if !cfg.contains(key) {
        return Err(MtdsError::Config {
            key: key.into(),
            msg: "required but missing".into(),
        }
        .into());
    }
    Ok(cfg.get_list(key, Vec::new())?)
}

pub fn loo(cfg: &RunConfig, out: &Option<PathBuf>) -> CmdResult {
    let dir = out_dir(out)?;
    let data = load_data(cfg)?;
    let mut lc = cfg.loo_config()?;
    lc.model = model_for(cfg, &data)?;
    let report = loo_driver(&data, &lc)?;
    for (m, rep) in &report.reports {
        let mut f = create(&dir.join(format!("loo_{}.csv", m.name())))?;
        rep.write_csv(&mut f)?;
        f.flush()?;
    }
    let mut summary = Vec::new();
    let srmse = if lc.srmse { ",srmse" } else { "" };
    writeln!(summary, "method,anchor,horizon,rmse{srmse}")?;
    for (m, rep) in &report.reports {
        print_summary(&mut summary, &format!("{},", m.name()), rep, &lc.anchors, &lc.horizons)?;
    }
    std::fs::write(dir.join("loo_summary.csv"), &summary)?;
    std::io::stdout().write_all(&summary)?;
    Ok(())
}

pub fn kalman_check(cfg: &RunConfig, out: &Option<PathBuf>) -> CmdResult {
    let n_models: usize = cfg.get("kalman.n_models", 20)?;
    let max_nx: usize = cfg.get("kalman.max_nx", 4)?;
    let n_y: usize = cfg.get("kalman.n_y", 2)?;
    let t_len: usize = cfg.get("kalman.t", 300)?;
    let tol: f64 = cfg.get("kalman.tol", 1e-4)?;
    if max_nx == 0 || n_y == 0 || t_len < 2 {
        return Err(CliError::Usage(
            "kalman.max_nx, kalman.n_y must be positive and kalman.t ≥ 2".into(),
        ));
    }
    let seed = cfg.seed()?;
    let mut table = String::from("model,n_x,n_y,t_conv,gap\n");
    let mut worst = 0.0f64;
    for i in 0..n_models {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let n_x = 1 + i % max_nx;
        let model = StochasticLds::random_stable(n_x, n_y, &mut rng);
        let y = model.sample(t_len, &mut rng);
        let (gap, t_conv) = equivalence_gap(&model, &y, 1e-8).map_err(|e| e.in_fold(i))?;
        table.push_str(&format!("{i},{n_x},{n_y},{t_conv},{gap:e}\n"));
        worst = worst.max(gap);
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("kalman_check.csv"), &table)?;
    }
    println!("kalman-check: {n_models} models, max per-step gap {worst:e} nats (tolerance {tol:e})");
    if !(worst < tol) {
        return Err(CliError::CheckFailed(format!("max gap {worst:e} ≥ {tol:e}")));
    }
    Ok(())
}

/// One base model exercised by `grad-check`.
pub struct GradCase {
    pub model: BaseModel,
    /// Config key overriding `tol`.
    pub tol_key: &'static str,
    pub tol: f64,
    /// Central-difference step. The MT-RNN log-likelihood is large
    /// relative to its smallest gradient entries, so roundoff dominates
    /// below 1e-4.
    pub h: f64,
    pub t_len: usize,
}

/// LDS and PD at full size; the MT-RNN with narrowed widths (12 / 4 / 8)
/// so that 20 instances of a full finite-difference sweep stay cheap.
pub fn grad_check_models() -> Vec<GradCase> {
    vec![
        GradCase {
            model: BaseModel::Lds(LdsSpec::new(3, 2, 2).expect("valid")),
            tol_key: "grad.tol_lds",
            tol: 1e-4,
            h: 1e-5,
            t_len: 50,
        },
        GradCase {
            model: BaseModel::Pd(PdSpec::standard(2)),
            tol_key: "grad.tol_pd",
            tol: 1e-4,
            h: 1e-5,
            t_len: 50,
        },
        GradCase {
            model: BaseModel::MtRnn(MtRnnSpec::new(2, 2, 12, 4, 8).expect("valid")),
            tol_key: "grad.tol_mtrnn",
            tol: 1e-3,
            h: 1e-4,
            t_len: 20,
        },
    ]
}

pub fn grad_check(cfg: &RunConfig, out: &Option<PathBuf>) -> CmdResult {
    let n: usize = cfg.get("grad.n_instances", 20)?;
    let t_override: Option<usize> = cfg.get_opt("grad.t")?;
    let h_override: Option<f64> = cfg.get_opt("grad.h")?;
    if h_override.is_some_and(|h| !(h > 0.0)) || t_override == Some(0) {
        return Err(CliError::Usage("grad.h and grad.t must be positive".into()));
    }
    let seed = cfg.seed()?;
    let mut table = String::from("model,instance,max_rel_err\n");
    let mut failures = Vec::new();
    for case in grad_check_models() {
        let tol: f64 = cfg.get(case.tol_key, case.tol)?;
        let (h, t_len) = (h_override.unwrap_or(case.h), t_override.unwrap_or(case.t_len));
        let name = case.model.kind().name();
        let mut worst = 0.0f64;
        for i in 0..n {
            let err = random_instance_check(&case.model, 2, t_len, seed.wrapping_add(i as u64), h)?;
            table.push_str(&format!("{name},{i},{err:e}\n"));
            worst = worst.max(err);
        }
        println!("{name} max_rel_err {worst:e} (tolerance {tol:e})");
        if !(worst < tol) {
            failures.push(format!("{name} {worst:e} ≥ {tol:e}"));
        }
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("grad_check.csv"), &table)?;
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(failures.join("; ")))
    }
}
