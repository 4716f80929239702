//! Acceptance criteria. Each test writes one `PASS`/`FAIL` line to stderr with its
//! measurements and wall time, then asserts. A process-wide lock runs the
//! criteria one at a time so the timings are not inflated by each other.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use mtds_cli::grad_check_models;
use mtds_core::adais::{naive_smc_ess_trace, sequential_filter_with_rng, AdaIsConfig, GaussianMixture};
use mtds_core::baselines::{loo_driver, LooConfig, Method};
use mtds_core::gradients::random_instance_check;
use mtds_core::io::{generate_synthetic, SyntheticData, SyntheticFamilySpec};
use mtds_core::kalman::{equivalence_gap, StochasticLds};
use mtds_core::learning::{elbo_value, log_marginal_is_estimate, train, TrainConfig};
use mtds_core::models::pd_rates_to_discrete;
use mtds_core::{gaussian_loglik, BaseModel, LatentCode, NoisePrecision, ParamGenerator, SequenceRecord};
use nalgebra::DVector;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn criterion<F: FnOnce() -> (bool, String)>(id: u32, name: &str, limit: Duration, body: F) {
    let _guard = SERIAL.lock().unwrap_or_else(|p| p.into_inner());
    let start = Instant::now();
    let (ok, detail) = body();
    let elapsed = start.elapsed();
    let in_time = elapsed <= limit;
    let verdict = if ok && in_time { "PASS" } else { "FAIL" };
    let line = format!(
        "criterion {id:>2} {verdict} {name}: {detail} [{:.1} s of {} s]",
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    // the raw handle bypasses libtest's capture, so passing runs still report
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(ok, "criterion {id} ({name}) failed: {detail}");
    assert!(in_time, "criterion {id} ({name}) exceeded {} s", limit.as_secs());
}

fn minutes(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

// ----------------------------------------------------------------------
// grid oracles

fn log_joint(
    model: &BaseModel,
    gen: &ParamGenerator,
    shared: &[f64],
    nu: &NoisePrecision,
    rec: &SequenceRecord,
    z: &[f64],
) -> f64 {
    let prior = -0.5 * z.iter().map(|v| v * v).sum::<f64>();
    let Ok(theta) = gen.apply(&LatentCode(DVector::from_column_slice(z))) else {
        return f64::NEG_INFINITY;
    };
    match model.simulate(shared, theta.as_slice(), &rec.u) {
        Ok(yhat) => prior + gaussian_loglik(&yhat, &rec.y, &rec.mask, nu),
        Err(_) => f64::NEG_INFINITY,
    }
}

/// Normalized grid density over `n` points spanning the region where the
/// log density is within 40 nats of its maximum, located on a coarse scan
/// of `[−8, 8]`.
fn grid_1d(lp: impl Fn(f64) -> f64, n: usize) -> (Vec<f64>, Vec<f64>, f64) {
    let coarse: Vec<f64> = (0..=4000).map(|i| -8.0 + 16.0 * i as f64 / 4000.0).collect();
    let vals: Vec<f64> = coarse.iter().map(|&z| lp(z)).collect();
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let inside: Vec<usize> = (0..coarse.len()).filter(|&i| vals[i] > max - 40.0).collect();
    let step = coarse[1] - coarse[0];
    let lo = coarse[inside[0]] - 2.0 * step;
    let hi = coarse[*inside.last().unwrap()] + 2.0 * step;
    let dz = (hi - lo) / (n - 1) as f64;
    let grid: Vec<f64> = (0..n).map(|i| lo + dz * i as f64).collect();
    let l: Vec<f64> = grid.iter().map(|&z| lp(z)).collect();
    let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = w.iter().sum::<f64>() * dz;
    (grid, w.iter().map(|v| v / total).collect(), dz)
}

fn total_variation(q: &GaussianMixture, grid: &[f64], p: &[f64], dz: f64) -> f64 {
    let qd: Vec<f64> = grid
        .iter()
        .map(|&z| q.logpdf(&DVector::from_vec(vec![z])).exp())
        .collect();
    let qn: f64 = qd.iter().sum::<f64>() * dz;
    0.5 * qd.iter().zip(p).map(|(a, b)| (a / qn - b).abs()).sum::<f64>() * dz
}

struct K1Problem {
    label: &'static str,
    spec: SyntheticFamilySpec,
    record: SequenceRecord,
}

fn k1_problems() -> Vec<K1Problem> {
    let pd = SyntheticFamilySpec::pd(1, 1, 1, 100, 25.0).unwrap();
    let lds = SyntheticFamilySpec::lds(1, 1, 100, 4.0).unwrap();
    [("pd", pd, 41), ("lds", lds, 42)]
        .into_iter()
        .map(|(label, spec, seed)| {
            let record = generate_synthetic(&spec, seed).unwrap().dataset.sequences.remove(0);
            K1Problem { label, spec, record }
        })
        .collect()
}

fn big_adais(seed: u64) -> AdaIsConfig {
    AdaIsConfig {
        m: 4000,
        m_ess: 1000.0,
        j: 2,
        thin: 5,
        seed,
        ..AdaIsConfig::default()
    }
}

// ----------------------------------------------------------------------
// shared k* = 2 family and trained model for criteria 6 and 7

fn family() -> SyntheticFamilySpec {
    SyntheticFamilySpec::pd(2, 1, 32, 100, 25.0).unwrap()
}

fn family_train_config() -> TrainConfig {
    TrainConfig {
        seed: 7,
        ..TrainConfig::with_iters(3000)
    }
}

struct Trained {
    data: SyntheticData,
    state: mtds_core::learning::TrainState,
}

static TRAINED: std::sync::OnceLock<Trained> = std::sync::OnceLock::new();

fn trained() -> &'static Trained {
    TRAINED.get_or_init(|| {
        let spec = family();
        let data = generate_synthetic(&spec, 100).unwrap();
        let out = train(&data.dataset, &spec.model, 2, &family_train_config()).unwrap();
        Trained { data, state: out.state }
    })
}

// ----------------------------------------------------------------------

#[test]
fn c01_gradient_correctness() {
    criterion(
        1,
        "analytic vs finite-difference gradients",
        Duration::from_secs(60),
        || {
            let mut ok = true;
            let mut parts = Vec::new();
            for case in grad_check_models() {
                let worst = (0..20u64)
                    .map(|seed| random_instance_check(&case.model, 2, case.t_len, 1000 + seed, case.h).unwrap())
                    .fold(0.0, f64::max);
                ok &= worst < case.tol;
                parts.push(format!(
                    "{} T={} {worst:.1e} (< {:.0e})",
                    case.model.kind().name(),
                    case.t_len,
                    case.tol
                ));
            }
            (ok, parts.join(", "))
        },
    );
}

/// One unit interval of `dx/dt = k1e·c − ke0·x` by RK4 with `n` substeps.
fn rk4(k1e: f64, ke0: f64, x0: f64, c: f64, n: usize) -> f64 {
    let f = |x: f64| k1e * c - ke0 * x;
    let h = 1.0 / n as f64;
    let mut x = x0;
    for _ in 0..n {
        let a = f(x);
        let b = f(x + 0.5 * h * a);
        let cc = f(x + 0.5 * h * b);
        let d = f(x + h * cc);
        x += h / 6.0 * (a + 2.0 * b + 2.0 * cc + d);
    }
    x
}

#[test]
fn c02_pd_discretization() {
    criterion(2, "PD rate discretization vs RK4", Duration::from_secs(10), || {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let k1e = rng.random_range(0.01..3.0);
            let ke0 = rng.random_range(0.01..3.0);
            let (b1, b2) = pd_rates_to_discrete(k1e, ke0).unwrap();
            // a piecewise-constant input run through both forms
            let (mut x_ode, mut x_rec) = (0.0, 0.0);
            for step in 0..20 {
                let c = if (step / 5) % 2 == 0 {
                    rng.random_range(0.0..2.0)
                } else {
                    0.0
                };
                x_ode = rk4(k1e, ke0, x_ode, c, 200);
                x_rec = b1 * x_rec + b2 * c;
                worst = worst.max((x_ode - x_rec).abs());
            }
            worst = worst.max((rk4(k1e, ke0, 1.0, 0.0, 200) - b1).abs());
            worst = worst.max((rk4(k1e, ke0, 0.0, 1.0, 200) - b2).abs());
        }
        (worst < 1e-6, format!("max abs error {worst:.2e} over 100 rate pairs"))
    });
}

#[test]
fn c03_kalman_equivalence() {
    criterion(
        3,
        "Kalman vs steady-state deterministic LDS",
        Duration::from_secs(30),
        || {
            let mut worst = 0.0f64;
            for i in 0..20usize {
                let mut rng = ChaCha8Rng::seed_from_u64(3);
                rng.set_stream(i as u64);
                let model = StochasticLds::random_stable(1 + i % 4, 1 + i % 3, &mut rng);
                let y = model.sample(300, &mut rng);
                let (gap, _) = equivalence_gap(&model, &y, 1e-8).unwrap();
                worst = worst.max(gap);
            }
            (
                worst < 1e-4,
                format!("max per-step gap {worst:.2e} nats over 20 models"),
            )
        },
    );
}

#[test]
fn c04_adais_vs_grid() {
    criterion(4, "AdaIS filter vs 512-point grid posterior", minutes(5), || {
        let mut ok = true;
        let mut parts = Vec::new();
        for (i, p) in k1_problems().iter().enumerate() {
            let cfg = big_adais(40 + i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let steps = sequential_filter_with_rng(
                &p.record,
                &p.spec.generator,
                &p.spec.shared,
                &p.spec.nu,
                &p.spec.model,
                &cfg,
                &mut rng,
            )
            .unwrap();
            let q = &steps.last().unwrap().gmm;
            let (grid, dens, dz) = grid_1d(
                |z| {
                    log_joint(
                        &p.spec.model,
                        &p.spec.generator,
                        &p.spec.shared,
                        &p.spec.nu,
                        &p.record,
                        &[z],
                    )
                },
                512,
            );
            let tv = total_variation(q, &grid, &dens, dz);
            ok &= tv < 0.05;
            parts.push(format!("{} TV {tv:.4}", p.label));
        }
        (ok, parts.join(", "))
    });
}

#[test]
fn c05_smc_degeneracy() {
    criterion(5, "naive SMC degenerates while AdaIS keeps its ESS", minutes(5), || {
        let mut ok = true;
        let mut parts = Vec::new();
        for (i, p) in k1_problems().iter().enumerate() {
            let cfg = big_adais(50 + i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let trace = naive_smc_ess_trace(
                &p.record,
                &p.spec.generator,
                &p.spec.shared,
                &p.spec.nu,
                &p.spec.model,
                cfg.m,
                &mut rng,
            )
            .unwrap();
            let final_ess = *trace.last().unwrap();
            let steps = sequential_filter_with_rng(
                &p.record,
                &p.spec.generator,
                &p.spec.shared,
                &p.spec.nu,
                &p.spec.model,
                &cfg,
                &mut rng,
            )
            .unwrap();
            let accepted: Vec<f64> = steps
                .iter()
                .filter(|s| s.diagnostics.reached)
                .map(|s| *s.diagnostics.ess_trace.last().unwrap())
                .collect();
            let min_accepted = accepted.iter().copied().fold(f64::INFINITY, f64::min);
            ok &= final_ess < 0.1 * cfg.m as f64 && !accepted.is_empty() && min_accepted >= cfg.m_ess;
            parts.push(format!(
                "{} naive ESS at T=100 {final_ess:.1} (< {}), {} of {} stops accepted, min accepted ESS {min_accepted:.1} (>= {})",
                p.label,
                0.1 * cfg.m as f64,
                accepted.len(),
                steps.len(),
                cfg.m_ess
            ));
        }
        (ok, parts.join("; "))
    });
}

#[test]
fn c06_elbo_validity() {
    criterion(6, "ELBO below the importance-sampled log marginal", minutes(10), || {
        let tr = trained();
        let nu = tr.state.nu().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let picks = sample(&mut rng, tr.data.dataset.len(), 10).into_vec();
        let mut worst_margin = f64::INFINITY;
        let mut ok = true;
        for i in picks {
            let rec = &tr.data.dataset.sequences[i];
            let elbo = elbo_value(&tr.state, rec, 2000, &mut rng).unwrap();
            let is = log_marginal_is_estimate(
                &tr.state.model,
                rec,
                &tr.state.gen,
                &tr.state.shared,
                &nu,
                100_000,
                &mut rng,
            )
            .unwrap();
            let margin = is.value + 3.0 * is.std_err - elbo;
            ok &= margin >= 0.0;
            worst_margin = worst_margin.min(margin);
        }
        (
            ok,
            format!("10 sequences, smallest (log p + 3 se) - ELBO = {worst_margin:.3} nats"),
        )
    });
}

/// Whether `point` lies in the central 95% highest-density region of the
/// grid posterior over a box around the posterior mass.
fn in_hpd_95(lp: impl Fn(&[f64]) -> f64, point: &[f64]) -> bool {
    let coarse_n = 81;
    let coord = |i: usize, lo: f64, hi: f64, n: usize| lo + (hi - lo) * i as f64 / (n - 1) as f64;
    let mut vals = Vec::with_capacity(coarse_n * coarse_n);
    for i in 0..coarse_n {
        for j in 0..coarse_n {
            let z = [coord(i, -6.0, 6.0, coarse_n), coord(j, -6.0, 6.0, coarse_n)];
            vals.push((z, lp(&z)));
        }
    }
    let max = vals.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
    let step = 12.0 / (coarse_n - 1) as f64;
    let inside: Vec<[f64; 2]> = vals.iter().filter(|v| v.1 > max - 30.0).map(|v| v.0).collect();
    let bound = |d: usize, f: fn(f64, f64) -> f64, init: f64| inside.iter().map(|z| z[d]).fold(init, f);
    let (lo0, hi0) = (
        bound(0, f64::min, f64::INFINITY) - 2.0 * step,
        bound(0, f64::max, f64::NEG_INFINITY) + 2.0 * step,
    );
    let (lo1, hi1) = (
        bound(1, f64::min, f64::INFINITY) - 2.0 * step,
        bound(1, f64::max, f64::NEG_INFINITY) + 2.0 * step,
    );
    let n = 128;
    let mut cells = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            cells.push(lp(&[coord(i, lo0, hi0, n), coord(j, lo1, hi1, n)]));
        }
    }
    let m = cells.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mass: Vec<f64> = cells.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = mass.iter().sum();
    let mut sorted = mass.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut threshold = 0.0;
    for v in sorted {
        acc += v;
        threshold = v;
        if acc >= 0.95 * total {
            break;
        }
    }
    let idx = |x: f64, lo: f64, hi: f64| ((x - lo) / (hi - lo) * (n - 1) as f64).round();
    let (i, j) = (idx(point[0], lo0, hi0), idx(point[1], lo1, hi1));
    if !(0.0..n as f64).contains(&i) || !(0.0..n as f64).contains(&j) {
        return false;
    }
    mass[i as usize * n + j as usize] >= threshold
}

#[test]
fn c07_latent_recovery() {
    criterion(
        7,
        "filtered posterior mean inside the 95% grid region",
        minutes(15),
        || {
            let tr = trained();
            let nu = tr.state.nu().unwrap();
            let spec = SyntheticFamilySpec { n: 40, ..family() };
            let held = generate_synthetic(&spec, 200).unwrap();
            let cfg = AdaIsConfig {
                m: 2000,
                m_ess: 500.0,
                j: 2,
                thin: 10,
                seed: 7,
                ..AdaIsConfig::default()
            };
            let mut hits = 0;
            for (i, rec) in held.dataset.sequences.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(i as u64);
                let steps = sequential_filter_with_rng(
                    rec,
                    &tr.state.gen,
                    &tr.state.shared,
                    &nu,
                    &tr.state.model,
                    &cfg,
                    &mut rng,
                )
                .unwrap();
                let mean = steps.last().unwrap().gmm.mean();
                let lp = |z: &[f64]| log_joint(&tr.state.model, &tr.state.gen, &tr.state.shared, &nu, rec, z);
                if in_hpd_95(lp, mean.as_slice()) {
                    hits += 1;
                }
            }
            let frac = hits as f64 / 40.0;
            (
                frac >= 0.9,
                format!("{hits} of 40 held-out sequences ({:.0}%, need >= 90%)", 100.0 * frac),
            )
        },
    );
}

#[test]
fn c08_multi_task_advantage() {
    criterion(8, "leave-one-out PD: MTDS < Pooled-alpha < Pooled", minutes(20), || {
        let spec = SyntheticFamilySpec::pd(2, 1, 24, 100, 25.0).unwrap();
        let data = generate_synthetic(&spec, 800).unwrap();
        let mut cfg = LooConfig::new(
            spec.model.clone(),
            2,
            vec![Method::Mtds, Method::Pooled, Method::PooledAlpha],
        );
        cfg.train = TrainConfig::with_iters(1500);
        cfg.adais = AdaIsConfig {
            m: 1000,
            m_ess: 250.0,
            j: 2,
            thin: 10,
            ..AdaIsConfig::default()
        };
        cfg.anchors = vec![30, 70];
        cfg.horizons = vec![20];
        cfg.seed = 8;
        let report = loo_driver(&data.dataset, &cfg).unwrap();
        let agg = |m| report.aggregate(m, 70, 20).unwrap();
        let (mtds, pooled, alpha) = (agg(Method::Mtds), agg(Method::Pooled), agg(Method::PooledAlpha));
        (
            mtds < alpha && alpha < pooled,
            format!("20-step RMSE at anchor 70: MTDS {mtds:.4}, Pooled-alpha {alpha:.4}, Pooled {pooled:.4}"),
        )
    });
}

fn run_cli(args: &[&str], cwd: &Path) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_mtds"))
        .args(args)
        .current_dir(cwd)
        .env("MTDS_THREADS", "2")
        .output()
        .expect("spawn mtds")
        .status
        .code()
        .unwrap_or(-1)
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

const DETERMINISM_CONFIG: &str = "\
seed = 9
synth.kind = pd
synth.k = 2
synth.n = 5
synth.t = 50
model.kind = pd
k = 2
data.path = run/data.csv
train.n_iters = 150
adais.M = 400
adais.thin = 10
forecast.horizon = 10
eval.anchors = 20, 35
eval.horizons = 10
eval.methods = mtds, pooled, pooled-alpha, single-task
single_task.n_starts = 1
single_task.max_lm_iters = 100
kalman.n_models = 4
grad.n_instances = 2
";

#[test]
fn c09_determinism() {
    criterion(9, "every subcommand is byte-reproducible", minutes(10), || {
        let mut outputs = Vec::new();
        let mut codes = Vec::new();
        for _ in 0..2 {
            let tmp = tempfile::tempdir().unwrap();
            std::fs::write(tmp.path().join("run.cfg"), DETERMINISM_CONFIG).unwrap();
            for cmd in [
                "synth",
                "train",
                "filter",
                "forecast",
                "eval",
                "loo",
                "kalman-check",
                "grad-check",
            ] {
                codes.push((cmd, run_cli(&[cmd, "--config", "run.cfg", "--out", "run"], tmp.path())));
            }
            outputs.push(dir_bytes(&tmp.path().join("run")));
        }
        let failed: Vec<_> = codes.iter().filter(|(_, c)| *c != 0).collect();
        let names: Vec<&str> = outputs[0].iter().map(|(n, _)| n.as_str()).collect();
        let identical = outputs[0] == outputs[1];
        (
            failed.is_empty() && identical && names.len() >= 12,
            format!(
                "{} files identical across runs: {identical}; non-zero exits: {failed:?}",
                names.len()
            ),
        )
    });
}

#[test]
fn c10_invariant_suites() {
    criterion(10, "module invariant suites", minutes(45), || {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
        let target = root.join("target/invariants");
        let out = Command::new(env!("CARGO"))
            .args(["test", "--package", "mtds-core", "--lib", "--quiet"])
            .current_dir(&root)
            .env("CARGO_TARGET_DIR", &target)
            .output()
            .expect("spawn cargo");
        let stdout = String::from_utf8_lossy(&out.stdout);
        let summary = stdout
            .lines()
            .rfind(|l| l.starts_with("test result:"))
            .unwrap_or("no test summary")
            .to_string();
        (out.status.success(), summary)
    });
}
