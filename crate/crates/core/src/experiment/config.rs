use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::autodiff::AdamW;
use crate::bench::{PriorSpec, SplitCounts, WorldSpec};
use crate::encoders::{EncoderConfig, Variant};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    /// Train and evaluate the encoder + answer head.
    Model,
    /// Bypass the encoder: predict each type's training-majority answer.
    Frequency,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Model => "model",
            RunMode::Frequency => "frequency",
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RunMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model" => Ok(RunMode::Model),
            "frequency" => Ok(RunMode::Frequency),
            _ => Err(Error::Parse(format!("unknown run mode '{s}' (expected model or frequency)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl TrainConfig {
    /// Full-size recipe: AdamW, lr 2e-4, batch 128.
    pub fn full_scale() -> Self {
        let opt = AdamW::default();
        Self {
            lr: opt.lr,
            batch_size: 128,
            epochs: 15,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            weight_decay: opt.weight_decay,
        }
    }

    /// Small-model recipe for the synthetic benchmark.
    pub fn desk() -> Self {
        Self {
            lr: 3e-3,
            batch_size: 32,
            ..Self::full_scale()
        }
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("optimizer betas must be in [0,1) and eps > 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Everything needed to reproduce one grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub encoder: EncoderConfig,
    pub world: WorldSpec,
    pub prior: PriorSpec,
    pub counts: SplitCounts,
    /// Seed of the generated dataset; shared by every training seed.
    pub data_seed: u64,
    pub train: TrainConfig,
    /// Model initialization and batch-order seed.
    pub seed: u64,
    pub mode: RunMode,
    /// Where checkpoints and rows go; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Dataset file to read instead of generating.
    pub data_file: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn desk(variant: Variant) -> Self {
        Self {
            encoder: EncoderConfig::desk(variant),
            world: WorldSpec::default(),
            prior: PriorSpec::default(),
            counts: SplitCounts::default(),
            data_seed: 0,
            train: TrainConfig::desk(),
            seed: 1,
            mode: RunMode::Model,
            out_dir: None,
            data_file: None,
        }
    }

    pub fn full_scale(variant: Variant) -> Self {
        Self {
            encoder: EncoderConfig::full_scale(variant),
            train: TrainConfig::full_scale(),
            ..Self::desk(variant)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.world.validate()?;
        self.prior.validate(&self.world)?;
        self.train.validate()?;
        if self.encoder.vocab_size < self.world.vocab_size() {
            return Err(Error::Config(format!(
                "encoder vocabulary {} smaller than the world's {}",
                self.encoder.vocab_size,
                self.world.vocab_size()
            )));
        }
        if self.encoder.max_len < self.world.max_question_len() {
            return Err(Error::Config(format!(
                "encoder max_len {} shorter than the longest question {}",
                self.encoder.max_len,
                self.world.max_question_len()
            )));
        }
        Ok(())
    }

    /// Every field as `key -> value`; paths only when set.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = self.encoder.to_map();
        m.extend(self.world.to_map());
        m.extend(self.prior.to_map());
        let t = &self.train;
        for (k, v) in [
            ("data.train", self.counts.train.to_string()),
            ("data.id_test", self.counts.id_test.to_string()),
            ("data.ood_test", self.counts.ood_test.to_string()),
            ("data.seed", self.data_seed.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.eps", t.eps.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("run.seed", self.seed.to_string()),
            ("run.mode", self.mode.to_string()),
        ] {
            m.insert(k.into(), v);
        }
        if let Some(p) = &self.out_dir {
            m.insert("run.out_dir".into(), p.display().to_string());
        }
        if let Some(p) = &self.data_file {
            m.insert("data.file".into(), p.display().to_string());
        }
        m
    }

    /// Sets one field from its key; unknown keys are parse errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.encoder.apply(key, value)? || self.world.apply(key, value)? || self.prior.apply(key, value)? {
            return Ok(());
        }
        fn num<T: FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Parse(format!("bad value '{v}' for {k}")))
        }
        let t = &mut self.train;
        match key {
            "data.train" => self.counts.train = num(key, value)?,
            "data.id_test" => self.counts.id_test = num(key, value)?,
            "data.ood_test" => self.counts.ood_test = num(key, value)?,
            "data.seed" => self.data_seed = num(key, value)?,
            "data.file" => self.data_file = Some(PathBuf::from(value)),
            "train.lr" => t.lr = num(key, value)?,
            "train.batch_size" => t.batch_size = num(key, value)?,
            "train.epochs" => t.epochs = num(key, value)?,
            "train.beta1" => t.beta1 = num(key, value)?,
            "train.beta2" => t.beta2 = num(key, value)?,
            "train.eps" => t.eps = num(key, value)?,
            "train.weight_decay" => t.weight_decay = num(key, value)?,
            "run.seed" => self.seed = num(key, value)?,
            "run.mode" => self.mode = value.parse()?,
            "run.out_dir" => self.out_dir = Some(PathBuf::from(value)),
            _ => return Err(Error::Parse(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Canonical text form: one sorted `key=value` per line.
    pub fn to_text(&self) -> String {
        self.to_map().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Parses `key=value` lines (blank lines and `#` comments ignored) on top
    /// of the desk defaults of the variant named by `encoder.variant`.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key=value", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let variant = match pairs.iter().find(|(k, _)| k == "encoder.variant") {
            Some((_, v)) => v.parse()?,
            None => Variant::Transformer,
        };
        let mut cfg = Self::desk(variant);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Canonical text without output or input paths; equal digests mean
    /// equal experiments.
    pub fn digest(&self) -> String {
        let mut m = self.to_map();
        m.remove("run.out_dir");
        m.remove("data.file");
        crate::encoders::config_canonical(&m)
    }
}
