//! Flat `key = value` run configuration.
//!
//! One entry per line, `#` starts a comment, keys are dotted
//! (`adais.M = 1000`). Unknown and duplicate keys are errors.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::adais::AdaIsConfig;
use crate::baselines::{LooConfig, Method, SingleTaskConfig};
use crate::error::{MtdsError, Result};
use crate::io::synthetic::{InputSpec, LatentSpec, SyntheticFamilySpec};
use crate::learning::TrainConfig;
use crate::models::{BaseModel, LdsSpec, ModelKind, MtRnnSpec, PdSpec};

/// Every accepted key with a one-line description.
pub const KNOWN_KEYS: &[(&str, &str)] = &[
    ("seed", "seed for every random stream (default 0)"),
    ("data.path", "sequence CSV"),
    ("model.path", "trained model artifact"),
    ("posteriors.path", "filtered posterior CSV"),
    ("model.kind", "lds | pd | mtrnn"),
    ("model.n_y", "output channels"),
    ("model.n_u", "input channels (lds, mtrnn)"),
    ("model.n_x", "LDS state dimension"),
    ("model.n1", "MT-RNN GRU width"),
    ("model.ell", "MT-RNN bottleneck width"),
    ("model.n2", "MT-RNN latent-dependent layer width"),
    ("k", "latent dimension"),
    ("train.n_iters", "optimizer iterations"),
    ("train.batch_size", "sequences per minibatch"),
    ("train.lr_main", "rate for shared parameters and precisions"),
    ("train.lr_mt", "rate for the generator and posteriors"),
    ("train.kl_warmup_iters", "iterations of linear KL annealing"),
    ("train.n_mc_samples", "reparameterized draws per sequence"),
    ("train.l2_main", "decoupled weight decay on shared parameters"),
    ("train.l2_mt", "decoupled weight decay on loadings"),
    ("train.segment_len", "train on segments of this length"),
    ("train.log_interval", "iterations between diagnostics"),
    ("train.log_wallclock", "record elapsed time in the log"),
    ("adais.M", "particles per adaptation"),
    ("adais.M_ess", "ESS stopping threshold"),
    ("adais.N_adais", "maximum adaptations"),
    ("adais.J", "mixture components"),
    ("adais.cov_floor", "covariance eigenvalue floor"),
    ("adais.thin", "filter every this many steps"),
    ("adais.quasi_random", "scrambled Sobol draws"),
    ("adais.n_em_iters", "weighted EM iterations"),
    ("synth.kind", "pd | lds"),
    ("synth.k", "true latent dimension"),
    ("synth.n", "number of sequences"),
    ("synth.t", "sequence length"),
    ("synth.nu", "observation precision"),
    ("synth.n_y", "output channels (pd)"),
    (
        "synth.input",
        "pulses | impulse | noise (default: pulses for pd, noise for lds)",
    ),
    ("synth.latent", "standard | two-cluster"),
    ("synth.separation", "cluster separation for two-cluster latents"),
    ("filter.seq_id", "sequence to filter (default: first)"),
    (
        "forecast.anchor",
        "observed steps before the forecast (default: latest posterior before the end)",
    ),
    ("forecast.horizon", "steps to forecast"),
    ("forecast.samples", "posterior-predictive draws"),
    ("eval.methods", "comma list of mtds, pooled, pooled-alpha, single-task"),
    ("eval.anchors", "comma list of anchor steps"),
    ("eval.horizons", "comma list of horizons"),
    ("eval.forecast_samples", "posterior-predictive draws per forecast"),
    ("eval.srmse", "also report RMSE relative to a per-sequence fit"),
    ("single_task.prior_sd", "prior sd of unconstrained parameters"),
    ("single_task.n_starts", "optimizer restarts"),
    ("single_task.max_lm_iters", "optimizer iterations per start"),
    ("kalman.n_models", "random stable systems to check"),
    ("kalman.max_nx", "largest state dimension"),
    ("kalman.n_y", "output dimension"),
    ("kalman.t", "sequence length"),
    ("kalman.tol", "largest allowed per-step log-density gap"),
    ("grad.n_instances", "random instances per model"),
    ("grad.t", "sequence length for every model (default: per model)"),
    ("grad.h", "finite-difference step for every model (default: per model)"),
    ("grad.tol_lds", "largest allowed relative error for LDS"),
    ("grad.tol_pd", "largest allowed relative error for PD"),
    ("grad.tol_mtrnn", "largest allowed relative error for MT-RNN"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
struct Entry {
    value: String,
    /// Source line; 0 for command-line overrides.
    line: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunConfig {
    entries: BTreeMap<String, Entry>,
}

fn is_known(key: &str) -> bool {
    KNOWN_KEYS.iter().any(|(k, _)| *k == key)
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-')
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_named(text, "<config>")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|e| {
            let line = bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count() + 1;
            MtdsError::parse("<config>", line, "invalid UTF-8")
        })?;
        Self::parse(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let name = path.display().to_string();
        let text = std::str::from_utf8(&bytes).map_err(|_| MtdsError::parse(&name, 0, "invalid UTF-8"))?;
        Self::parse_named(text, &name)
    }

    fn parse_named(text: &str, name: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((k, v)) = content.split_once('=') else {
                return Err(MtdsError::parse(
                    name,
                    line,
                    format!("expected `key = value`, got `{content}`"),
                ));
            };
            let (k, v) = (k.trim(), v.trim());
            if !valid_key(k) {
                return Err(MtdsError::parse(name, line, format!("malformed key `{k}`")));
            }
            cfg.insert(k, v, line, name)?;
        }
        Ok(cfg)
    }

    fn insert(&mut self, key: &str, value: &str, line: usize, name: &str) -> Result<()> {
        let at = if line == 0 {
            format!("from {name}")
        } else {
            format!("{name} line {line}")
        };
        if !is_known(key) {
            return Err(MtdsError::Config {
                key: key.into(),
                msg: format!("unknown key ({at})"),
            });
        }
        if value.is_empty() {
            return Err(MtdsError::Config {
                key: key.into(),
                msg: format!("empty value ({at})"),
            });
        }
        if line > 0 && self.entries.contains_key(key) {
            return Err(MtdsError::Config {
                key: key.into(),
                msg: format!("duplicate key ({name} line {line})"),
            });
        }
        self.entries.insert(
            key.to_string(),
            Entry {
                value: value.to_string(),
                line,
            },
        );
        Ok(())
    }

    /// Applies a `key=value` override, replacing any file value.
    pub fn set_override(&mut self, kv: &str) -> Result<()> {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(MtdsError::Config {
                key: kv.to_string(),
                msg: "override must be `key=value`".into(),
            });
        };
        let k = k.trim();
        if !valid_key(k) {
            return Err(MtdsError::Config {
                key: k.to_string(),
                msg: "malformed key".into(),
            });
        }
        self.insert(k, v.trim(), 0, "--set")
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get_raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    fn parse_value<T: FromStr>(&self, key: &str, e: &Entry) -> Result<T> {
        e.value.parse::<T>().map_err(|_| MtdsError::Config {
            key: key.into(),
            msg: match e.line {
                0 => format!("cannot parse `{}` (from --set)", e.value),
                l => format!("cannot parse `{}` (line {l})", e.value),
            },
        })
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.entries.get(key) {
            Some(e) => self.parse_value(key, e),
            None => Ok(default),
        }
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.entries.get(key).map(|e| self.parse_value(key, e)).transpose()
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get_opt(key)?.ok_or_else(|| MtdsError::Config {
            key: key.into(),
            msg: "required but missing".into(),
        })
    }

    /// Comma-separated list; an absent key yields `default`.
    pub fn get_list<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        let Some(e) = self.entries.get(key) else {
            return Ok(default);
        };
        e.value
            .split(',')
            .map(|s| {
                s.trim().parse::<T>().map_err(|_| MtdsError::Config {
                    key: key.into(),
                    msg: format!("cannot parse list element `{}`", s.trim()),
                })
            })
            .collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed", 0)
    }

    /// Base model from the `model.*` keys.
    pub fn model(&self) -> Result<BaseModel> {
        let kind: String = self.require("model.kind")?;
        let kind = ModelKind::parse(&kind).ok_or_else(|| MtdsError::Config {
            key: "model.kind".into(),
            msg: format!("unknown model `{kind}`"),
        })?;
        let n_y: usize = self.get("model.n_y", 1)?;
        let bad = |key: &str, e: MtdsError| MtdsError::Config {
            key: key.into(),
            msg: e.to_string(),
        };
        Ok(match kind {
            ModelKind::Lds => BaseModel::Lds(
                LdsSpec::new(self.get("model.n_x", 2)?, self.get("model.n_u", 1)?, n_y)
                    .map_err(|e| bad("model.n_x", e))?,
            ),
            ModelKind::Pd => {
                let std = PdSpec::standard(n_y);
                BaseModel::Pd(PdSpec::new(n_y, std.a, std.b).map_err(|e| bad("model.n_y", e))?)
            }
            ModelKind::MtRnn => {
                let toy = MtRnnSpec::toy(self.get("model.n_u", 1)?, n_y);
                BaseModel::MtRnn(
                    MtRnnSpec::new(
                        toy.n_u,
                        toy.n_y,
                        self.get("model.n1", toy.n1)?,
                        self.get("model.ell", toy.ell)?,
                        self.get("model.n2", toy.n2)?,
                    )
                    .map_err(|e| bad("model.n1", e))?,
                )
            }
        })
    }

    /// Synthetic family from the `synth.*` keys.
    pub fn synthetic_spec(&self) -> Result<SyntheticFamilySpec> {
        let kind: String = self.get("synth.kind", "pd".to_string())?;
        let k: usize = self.get("synth.k", 2)?;
        let n: usize = self.get("synth.n", 32)?;
        let t: usize = self.get("synth.t", 100)?;
        let nu: f64 = self.get("synth.nu", 100.0)?;
        let bad = |key: &str, e: MtdsError| MtdsError::Config {
            key: key.into(),
            msg: e.to_string(),
        };
        let mut spec = match ModelKind::parse(&kind) {
            Some(ModelKind::Pd) => SyntheticFamilySpec::pd(k, self.get("synth.n_y", 1)?, n, t, nu),
            Some(ModelKind::Lds) => SyntheticFamilySpec::lds(k, n, t, nu),
            _ => {
                return Err(MtdsError::Config {
                    key: "synth.kind".into(),
                    msg: format!("no synthetic family for `{kind}`"),
                })
            }
        }
        .map_err(|e| bad("synth", e))?;
        if let Some(name) = self.get_opt::<String>("synth.input")? {
            spec.input = InputSpec::parse(&name).ok_or_else(|| MtdsError::Config {
                key: "synth.input".into(),
                msg: format!("unknown input process `{name}`"),
            })?;
        }
        let latent: String = self.get("synth.latent", "standard".to_string())?;
        spec.latent = match latent.as_str() {
            "standard" => LatentSpec::Standard,
            "two-cluster" => LatentSpec::TwoCluster {
                separation: self.get("synth.separation", 4.0)?,
                spread: 0.3,
            },
            other => {
                return Err(MtdsError::Config {
                    key: "synth.latent".into(),
                    msg: format!("unknown latent distribution `{other}`"),
                })
            }
        };
        spec.validate().map_err(|e| bad("synth", e))?;
        Ok(spec)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let n_iters: usize = self.get("train.n_iters", TrainConfig::default().n_iters)?;
        let base = TrainConfig::with_iters(n_iters);
        let cfg = TrainConfig {
            n_iters,
            batch_size: self.get("train.batch_size", base.batch_size)?,
            lr_main: self.get("train.lr_main", base.lr_main)?,
            lr_mt: self.get("train.lr_mt", base.lr_mt)?,
            kl_warmup_iters: self.get("train.kl_warmup_iters", base.kl_warmup_iters)?,
            n_mc_samples: self.get("train.n_mc_samples", base.n_mc_samples)?,
            l2_main: self.get("train.l2_main", base.l2_main)?,
            l2_mt: self.get("train.l2_mt", base.l2_mt)?,
            seed: self.seed()?,
            segment_len: self.get_opt("train.segment_len")?,
            frozen_rows: Vec::new(),
            freeze_loadings: false,
            log_interval: self.get("train.log_interval", base.log_interval)?,
            log_wallclock: self.get("train.log_wallclock", false)?,
        };
        cfg.validate().map_err(|e| MtdsError::Config {
            key: "train".into(),
            msg: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn adais_config(&self) -> Result<AdaIsConfig> {
        let d = AdaIsConfig::default();
        let m: usize = self.get("adais.M", d.m)?;
        let cfg = AdaIsConfig {
            m,
            m_ess: self.get("adais.M_ess", m as f64 / 4.0)?,
            n_adais: self.get("adais.N_adais", d.n_adais)?,
            j: self.get("adais.J", d.j)?,
            cov_floor: self.get("adais.cov_floor", d.cov_floor)?,
            thin: self.get("adais.thin", d.thin)?,
            quasi_random: self.get("adais.quasi_random", d.quasi_random)?,
            n_em_iters: self.get("adais.n_em_iters", d.n_em_iters)?,
            seed: self.seed()?,
        };
        cfg.validate().map_err(|e| MtdsError::Config {
            key: "adais".into(),
            msg: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn single_task_config(&self) -> Result<SingleTaskConfig> {
        let d = SingleTaskConfig::default();
        Ok(SingleTaskConfig {
            prior_sd: self.get("single_task.prior_sd", d.prior_sd)?,
            adais: AdaIsConfig {
                j: 1,
                ..self.adais_config()?
            },
            n_starts: self.get("single_task.n_starts", d.n_starts)?,
            max_lm_iters: self.get("single_task.max_lm_iters", d.max_lm_iters)?,
            laplace_inflation: d.laplace_inflation,
        })
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        let names: Vec<String> = self.get_list("eval.methods", vec!["mtds".to_string()])?;
        names
            .iter()
            .map(|n| {
                Method::parse(n).ok_or_else(|| MtdsError::Config {
                    key: "eval.methods".into(),
                    msg: format!("unknown method `{n}`"),
                })
            })
            .collect()
    }

    pub fn loo_config(&self) -> Result<LooConfig> {
        let mut cfg = LooConfig::new(self.model()?, self.require("k")?, self.methods()?);
        cfg.train = self.train_config()?;
        cfg.adais = self.adais_config()?;
        cfg.single_task = self.single_task_config()?;
        cfg.anchors = self.require_list("eval.anchors")?;
        cfg.horizons = self.require_list("eval.horizons")?;
        cfg.n_forecast_samples = self.get("eval.forecast_samples", cfg.n_forecast_samples)?;
        cfg.srmse = self.get("eval.srmse", false)?;
        cfg.seed = self.seed()?;
        Ok(cfg)
    }

    fn require_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        if !self.contains(key) {
            return Err(MtdsError::Config {
                key: key.into(),
                msg: "required but missing".into(),
            });
        }
        self.get_list(key, Vec::new())
    }
}
