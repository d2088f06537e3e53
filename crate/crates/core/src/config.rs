//! Flat `key=value` run configuration.
//!
//! Precedence, lowest to highest: built-in defaults, the config file,
//! `--set key=value` flags in order, then `--seed`.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::baselines::{MethodId, MethodSpec, DEFAULT_GRADCAM_LAYER};
use crate::datagen::SynthConfig;
use crate::model::{ClassifierInput, ModelConfig, Widths};
use crate::objective::{LossConfig, Variant};
use crate::train::{OptimizerKind, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("config line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("{key}: {msg}")]
    Value { key: String, msg: String },
    #[error("cannot read config {path}: {msg}")]
    Read { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

pub const CONFIG_FILE: &str = "config.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Master seed for data generation, initialization, order and noise.
    pub seed: u64,
    pub synth: SynthConfig,
    /// Train/val/test sizes for `gen-data`.
    pub splits: [usize; 3],
    pub method: MethodId,
    /// Methods run by `compare`.
    pub methods: Vec<MethodId>,
    pub gradcam_layer: usize,
    pub width_divisor: usize,
    pub classifier_input: ClassifierInput,
    pub alpha: f64,
    pub l1_weight: f64,
    pub eps_samples: usize,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        Self {
            seed: 0,
            synth: SynthConfig::default(),
            splits: [2000, 500, 500],
            method: MethodId::InfoMask,
            methods: MethodId::ALL.to_vec(),
            gradcam_layer: DEFAULT_GRADCAM_LAYER,
            width_divisor: 1,
            classifier_input: ClassifierInput::MaskedImage,
            alpha: loss.alpha(),
            l1_weight: loss.l1_weight(),
            eps_samples: loss.eps_samples(),
            train: TrainConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.trim().parse().map_err(|e: T::Err| ConfigError::Value { key: key.into(), msg: format!("'{}': {e}", v.trim()) })
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse(key, s)).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "n_train" => self.splits[0] = parse(key, v)?,
            "n_val" => self.splits[1] = parse(key, v)?,
            "n_test" => self.splits[2] = parse(key, v)?,
            "method" => self.method = parse(key, v)?,
            "methods" => self.methods = parse_list(key, v)?,
            "gradcam_layer" => self.gradcam_layer = parse(key, v)?,
            "width_divisor" => self.width_divisor = parse(key, v)?,
            "classifier_input" => self.classifier_input = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "l1_weight" => self.l1_weight = parse(key, v)?,
            "eps_samples" => self.eps_samples = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "optimizer" => {
                let momentum = match t.optimizer {
                    OptimizerKind::SgdMomentum { momentum } => momentum,
                    _ => 0.9,
                };
                t.optimizer = parse(key, v)?;
                if let OptimizerKind::SgdMomentum { momentum: m } = &mut t.optimizer {
                    *m = momentum;
                }
            }
            "momentum" => {
                let m: f64 = parse(key, v)?;
                match &mut t.optimizer {
                    OptimizerKind::SgdMomentum { momentum } => *momentum = m,
                    _ => t.optimizer = OptimizerKind::SgdMomentum { momentum: m },
                }
            }
            "batch_size" => t.batch_size = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "tau_train" => t.tau_train = parse(key, v)?,
            "n_checkpoints" => t.n_checkpoints = parse(key, v)?,
            "fnr_cap" => t.fnr_cap = parse(key, v)?,
            "threshold_grid" => t.grid = parse_list(key, v)?,
            "reg_delay" => t.reg_delay = parse(key, v)?,
            "reg_ramp" => t.reg_ramp = parse(key, v)?,
            "eval_batch" => t.eval_batch = parse(key, v)?,
            _ => match key.strip_prefix("synth.") {
                Some(k) if k != "seed" => {
                    if !self.synth.set(k, v).map_err(|msg| ConfigError::Value { key: key.into(), msg })? {
                        return Err(ConfigError::UnknownKey(key.into()));
                    }
                }
                _ => return Err(ConfigError::UnknownKey(key.into())),
            },
        }
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Line { line: i + 1, msg: format!("not a key=value line: '{line}'") })?;
            self.set(k.trim(), v).map_err(|e| match e {
                ConfigError::UnknownKey(_) => e,
                other => ConfigError::Line { line: i + 1, msg: other.to_string() },
            })?;
        }
        Ok(())
    }

    /// Resolves defaults < file < overrides < seed.
    pub fn resolve(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError::Read { path: path.display().to_string(), msg: e.to_string() })?;
            cfg.apply_text(&text)?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| ConfigError::Value { key: o.clone(), msg: "expected key=value".into() })?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let t = &self.train;
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("seed", self.seed.to_string());
        kv("n_train", self.splits[0].to_string());
        kv("n_val", self.splits[1].to_string());
        kv("n_test", self.splits[2].to_string());
        kv("method", self.method.to_string());
        kv("methods", join(&self.methods));
        kv("gradcam_layer", self.gradcam_layer.to_string());
        kv("width_divisor", self.width_divisor.to_string());
        kv("classifier_input", self.classifier_input.to_string());
        kv("alpha", self.alpha.to_string());
        kv("l1_weight", self.l1_weight.to_string());
        kv("eps_samples", self.eps_samples.to_string());
        kv("lr", t.lr.to_string());
        kv("optimizer", t.optimizer.id().to_string());
        if let OptimizerKind::SgdMomentum { momentum } = t.optimizer {
            kv("momentum", momentum.to_string());
        }
        kv("batch_size", t.batch_size.to_string());
        kv("epochs", t.epochs.to_string());
        kv("tau_train", t.tau_train.to_string());
        kv("n_checkpoints", t.n_checkpoints.to_string());
        kv("fnr_cap", t.fnr_cap.to_string());
        kv("threshold_grid", join(&t.grid));
        kv("reg_delay", t.reg_delay.to_string());
        kv("reg_ramp", t.reg_ramp.to_string());
        kv("eval_batch", t.eval_batch.to_string());
        for line in self.synth.to_kv().lines().filter(|l| !l.starts_with("seed=")) {
            s.push_str("synth.");
            s.push_str(line);
            s.push('\n');
        }
        s
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig { seed: self.seed, ..self.synth.clone() }
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        LossConfig::new(Variant::InfoMask, self.alpha, self.l1_weight, self.eps_samples)
            .map_err(|e| ConfigError::Value { key: "alpha/l1_weight/eps_samples".into(), msg: e.to_string() })
    }

    /// Training configuration shared by every method (before method-specific changes).
    pub fn base_train_config(&self) -> Result<TrainConfig> {
        if self.width_divisor == 0 {
            return Err(ConfigError::Value { key: "width_divisor".into(), msg: "must be at least 1".into() });
        }
        Ok(TrainConfig {
            loss: self.loss_config()?,
            model: ModelConfig { widths: Widths::divided(self.width_divisor), classifier_input: self.classifier_input },
            seed: self.seed,
            ..self.train.clone()
        })
    }

    pub fn method_spec(&self, id: MethodId) -> Result<MethodSpec> {
        MethodSpec::standard(id, &self.loss_config()?, self.gradcam_layer)
            .map_err(|e| ConfigError::Value { key: "method".into(), msg: e.to_string() })
    }
}
