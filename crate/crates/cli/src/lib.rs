//! Command-line front end for `mtds-core`.
//!
//! Every subcommand reads a flat `key = value` configuration
//! (`--config`, then `--set key=value` overrides) and writes its outputs
//! into `--out`. Exit status is 0 on success, 1 for usage, configuration
//! and I/O errors, and 2 for numerical failures or failed checks.

// `!(x > 0.0)` deliberately rejects NaN; indexed loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

mod commands;

pub use commands::{grad_check_models, GradCase};

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use mtds_core::io::RunConfig;
use mtds_core::MtdsError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "mtds", version, about = "Multi-task dynamical systems toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
struct Common {
    /// Configuration file (`key = value` lines).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (created if missing).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic family: data.csv and truth.csv.
    Synth(Common),
    /// Fit an MTDS model: model.txt and train_log.csv.
    Train(Common),
    /// Filter one sequence's latent posterior: posteriors.csv.
    Filter(Common),
    /// Posterior-predictive forecast from a filtered posterior: forecast.csv.
    Forecast(Common),
    /// Score a trained model's forecasts on a dataset: eval.csv.
    Eval(Common),
    /// Leave-one-out comparison of MTDS and baselines.
    Loo(Common),
    /// Compare exact Kalman filtering with its steady-state deterministic form.
    KalmanCheck(Common),
    /// Compare analytic and finite-difference gradients for every base model.
    GradCheck(Common),
}

/// Failure of a subcommand, mapped onto an exit status.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(MtdsError),
    /// A check ran to completion but exceeded its tolerance.
    CheckFailed(String),
}

impl From<MtdsError> for CliError {
    fn from(e: MtdsError) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(MtdsError::Io(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) if e.is_numerical() => EXIT_NUMERICAL,
            CliError::Core(_) => EXIT_USAGE,
            CliError::CheckFailed(_) => EXIT_NUMERICAL,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::CheckFailed(m) => write!(f, "check failed: {m}"),
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &common.set {
        cfg.set_override(kv)?;
    }
    Ok(cfg)
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("MTDS_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("MTDS_THREADS must be a positive integer, got `{v}`")))?;
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the exit status. Diagnostics go to standard error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = configure_threads().and_then(|()| dispatch(cli.command));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("mtds: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    use commands as c;
    match cmd {
        Command::Synth(a) => c::synth(&load_config(&a)?, &a.out),
        Command::Train(a) => c::train(&load_config(&a)?, &a.out),
        Command::Filter(a) => c::filter(&load_config(&a)?, &a.out),
        Command::Forecast(a) => c::forecast(&load_config(&a)?, &a.out),
        Command::Eval(a) => c::eval(&load_config(&a)?, &a.out),
        Command::Loo(a) => c::loo(&load_config(&a)?, &a.out),
        Command::KalmanCheck(a) => c::kalman_check(&load_config(&a)?, &a.out),
        Command::GradCheck(a) => c::grad_check(&load_config(&a)?, &a.out),
    }
}
