//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional and
//! falls back to its default; unknown keys and malformed values are errors
//! that name the key. [`RunConfig::serialize`] writes every effective value,
//! so `parse(serialize(c)) == c`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::federation::{Aggregation, BitAllocation, DequantScale, FedConfig, QuantMode};
use crate::nncore::{Activation, ModelSpec};
use crate::weightstd::WsConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DataSource,
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
    pub test_fraction: f64,
    pub data_seed: u64,
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Dirichlet concentration; `None` for an i.i.d. split.
    pub alpha: Option<f64>,

    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub group_norm: bool,
    pub groups: usize,
    pub ws: bool,

    pub num_clients: usize,
    pub participation_rate: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub iterations_per_epoch: usize,
    pub lr_0: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub rho: f64,
    pub beta: f64,
    pub quant: QuantMode,
    pub alloc: BitAllocation,
    pub pin_zero: bool,
    pub dequant_scale: DequantScale,
    pub aggregate: Aggregation,
    pub seed: u64,
    pub ema_smoothing: f64,
    pub eval_every: usize,
    /// Record elapsed milliseconds per round; off keeps metrics reproducible.
    pub wallclock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DataSource::Synthetic,
            classes: 10,
            dim: 64,
            per_class: 300,
            spread: 3.0,
            test_fraction: 0.2,
            data_seed: 0,
            train_images: PathBuf::new(),
            train_labels: PathBuf::new(),
            test_images: PathBuf::new(),
            test_labels: PathBuf::new(),
            alpha: Some(0.3),
            hidden: vec![64, 64],
            activation: Activation::Relu,
            group_norm: true,
            groups: 8,
            ws: true,
            num_clients: 100,
            participation_rate: 0.05,
            rounds: 100,
            local_epochs: 5,
            iterations_per_epoch: 10,
            lr_0: 0.1,
            lr_decay: 0.995,
            weight_decay: 0.001,
            clip_norm: 10.0,
            rho: 0.001,
            beta: 0.1,
            quant: QuantMode::Danuq,
            alloc: BitAllocation::Constant(2),
            pin_zero: true,
            dequant_scale: DequantScale::Local,
            aggregate: Aggregation::Weighted,
            seed: 0,
            ema_smoothing: 0.9,
            eval_every: 1,
            wallclock: false,
        }
    }
}

const KEYS: &[&str] = &[
    "dataset",
    "classes",
    "dim",
    "per_class",
    "spread",
    "test_fraction",
    "data_seed",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "alpha",
    "hidden",
    "activation",
    "group_norm",
    "groups",
    "ws",
    "num_clients",
    "participation_rate",
    "rounds",
    "local_epochs",
    "iterations_per_epoch",
    "lr_0",
    "lr_decay",
    "weight_decay",
    "clip_norm",
    "rho",
    "beta",
    "quant",
    "bits",
    "pin_zero",
    "dequant_scale",
    "aggregate",
    "seed",
    "ema_smoothing",
    "eval_every",
    "wallclock",
];

fn bad(key: &str, value: &str, expected: &str) -> Error {
    Error::config(format!("key `{key}`: cannot parse `{value}` as {expected}"))
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, std::any::type_name::<T>()))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value, "true|false")),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::config(format!("key `{key}` given twice")));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Assigns one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => {
                self.dataset = match value {
                    "synthetic" => DataSource::Synthetic,
                    "idx" => DataSource::Idx,
                    _ => return Err(bad(key, value, "synthetic|idx")),
                }
            }
            "classes" => self.classes = num(key, value)?,
            "dim" => self.dim = num(key, value)?,
            "per_class" => self.per_class = num(key, value)?,
            "spread" => self.spread = num(key, value)?,
            "test_fraction" => self.test_fraction = num(key, value)?,
            "data_seed" => self.data_seed = num(key, value)?,
            "train_images" => self.train_images = value.into(),
            "train_labels" => self.train_labels = value.into(),
            "test_images" => self.test_images = value.into(),
            "test_labels" => self.test_labels = value.into(),
            "alpha" => {
                self.alpha = match value {
                    "iid" => None,
                    _ => Some(num(key, value)?),
                }
            }
            "hidden" => {
                self.hidden = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|v| num(key, v.trim()))
                        .collect::<Result<_>>()?
                }
            }
            "activation" => {
                self.activation = match value {
                    "relu" => Activation::Relu,
                    "tanh" => Activation::Tanh,
                    _ => return Err(bad(key, value, "relu|tanh")),
                }
            }
            "group_norm" => self.group_norm = flag(key, value)?,
            "groups" => self.groups = num(key, value)?,
            "ws" => self.ws = flag(key, value)?,
            "num_clients" => self.num_clients = num(key, value)?,
            "participation_rate" => self.participation_rate = num(key, value)?,
            "rounds" => self.rounds = num(key, value)?,
            "local_epochs" => self.local_epochs = num(key, value)?,
            "iterations_per_epoch" => self.iterations_per_epoch = num(key, value)?,
            "lr_0" => self.lr_0 = num(key, value)?,
            "lr_decay" => self.lr_decay = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "rho" => self.rho = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "quant" => {
                self.quant = match value {
                    "danuq" => QuantMode::Danuq,
                    "uniform" => QuantMode::Uniform,
                    "none" => QuantMode::FullPrecision,
                    _ => return Err(bad(key, value, "danuq|uniform|none")),
                }
            }
            "bits" => {
                self.alloc = match value {
                    "fba" => BitAllocation::Fba,
                    "dba" => BitAllocation::Dba,
                    _ => BitAllocation::Constant(num(key, value)?),
                }
            }
            "pin_zero" => self.pin_zero = flag(key, value)?,
            "dequant_scale" => {
                self.dequant_scale = match value {
                    "local" => DequantScale::Local,
                    "global" => DequantScale::Global,
                    _ => return Err(bad(key, value, "local|global")),
                }
            }
            "aggregate" => {
                self.aggregate = match value {
                    "weighted" => Aggregation::Weighted,
                    "sum" => Aggregation::Sum,
                    _ => return Err(bad(key, value, "weighted|sum")),
                }
            }
            "seed" => self.seed = num(key, value)?,
            "ema_smoothing" => self.ema_smoothing = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "wallclock" => self.wallclock = flag(key, value)?,
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        let path = |p: &PathBuf| p.display().to_string();
        match key {
            "dataset" => match self.dataset {
                DataSource::Synthetic => "synthetic".into(),
                DataSource::Idx => "idx".into(),
            },
            "classes" => self.classes.to_string(),
            "dim" => self.dim.to_string(),
            "per_class" => self.per_class.to_string(),
            "spread" => self.spread.to_string(),
            "test_fraction" => self.test_fraction.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "train_images" => path(&self.train_images),
            "train_labels" => path(&self.train_labels),
            "test_images" => path(&self.test_images),
            "test_labels" => path(&self.test_labels),
            "alpha" => self.alpha.map_or("iid".into(), |a| a.to_string()),
            "hidden" => self.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","),
            "activation" => match self.activation {
                Activation::Relu => "relu".into(),
                Activation::Tanh => "tanh".into(),
            },
            "group_norm" => self.group_norm.to_string(),
            "groups" => self.groups.to_string(),
            "ws" => self.ws.to_string(),
            "num_clients" => self.num_clients.to_string(),
            "participation_rate" => self.participation_rate.to_string(),
            "rounds" => self.rounds.to_string(),
            "local_epochs" => self.local_epochs.to_string(),
            "iterations_per_epoch" => self.iterations_per_epoch.to_string(),
            "lr_0" => self.lr_0.to_string(),
            "lr_decay" => self.lr_decay.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "rho" => self.rho.to_string(),
            "beta" => self.beta.to_string(),
            "quant" => match self.quant {
                QuantMode::Danuq => "danuq".into(),
                QuantMode::Uniform => "uniform".into(),
                QuantMode::FullPrecision => "none".into(),
            },
            "bits" => match self.alloc {
                BitAllocation::Constant(b) => b.to_string(),
                BitAllocation::Fba => "fba".into(),
                BitAllocation::Dba => "dba".into(),
            },
            "pin_zero" => self.pin_zero.to_string(),
            "dequant_scale" => match self.dequant_scale {
                DequantScale::Local => "local".into(),
                DequantScale::Global => "global".into(),
            },
            "aggregate" => match self.aggregate {
                Aggregation::Weighted => "weighted".into(),
                Aggregation::Sum => "sum".into(),
            },
            "seed" => self.seed.to_string(),
            "ema_smoothing" => self.ema_smoothing.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "wallclock" => self.wallclock.to_string(),
            _ => unreachable!("unlisted key {key}"),
        }
    }

    /// Every key with its effective value, one per line.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.value_of(key));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("key `classes`: need at least 2"));
        }
        if !(self.spread > 0.0) {
            return Err(Error::config("key `spread`: must be positive"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("key `test_fraction`: must be in (0, 1)"));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::config("key `alpha`: must be positive or `iid`"));
            }
        }
        if self.num_clients == 0 {
            return Err(Error::config("key `num_clients`: must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("key `eval_every`: must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_smoothing) {
            return Err(Error::config("key `ema_smoothing`: must be in [0, 1)"));
        }
        if let BitAllocation::Constant(b) = self.alloc {
            if !crate::danuq::SUPPORTED_BITS.contains(&b) {
                return Err(Error::config(format!("key `bits`: unsupported bit-width {b}")));
            }
        }
        if self.dataset == DataSource::Idx
            && [&self.train_images, &self.train_labels]
                .iter()
                .any(|p| p.as_os_str().is_empty())
        {
            return Err(Error::config("key `train_images`/`train_labels`: required for idx data"));
        }
        self.fed_config(self.dim).validate()
    }

    /// Model over `input_dim` features as configured.
    pub fn model_spec(&self, input_dim: usize) -> ModelSpec {
        let mut layer_sizes = vec![input_dim];
        layer_sizes.extend_from_slice(&self.hidden);
        layer_sizes.push(self.classes);
        ModelSpec {
            layer_sizes,
            activation: self.activation,
            use_group_norm: self.group_norm,
            groups: self.groups,
            ws_layers: if self.ws {
                (1..=self.hidden.len()).collect()
            } else {
                BTreeSet::new()
            },
        }
    }

    /// Federation settings; the thread cap comes from `FEDWSQ_THREADS`.
    pub fn fed_config(&self, input_dim: usize) -> FedConfig {
        FedConfig {
            model: self.model_spec(input_dim),
            ws: WsConfig {
                rho: self.rho,
                ..WsConfig::default()
            },
            participation_rate: self.participation_rate,
            local_epochs: self.local_epochs,
            iterations_per_epoch: self.iterations_per_epoch,
            lr0: self.lr_0,
            lr_decay: self.lr_decay,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            beta: self.beta,
            quant: self.quant,
            alloc: self.alloc,
            dequant_scale: self.dequant_scale,
            aggregate: self.aggregate,
            seed: self.seed,
            threads: thread_cap(),
        }
    }
}

/// Positive integer from `FEDWSQ_THREADS`, if set.
pub fn thread_cap() -> Option<usize> {
    std::env::var("FEDWSQ_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
}
