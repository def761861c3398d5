//! Experiment configuration in a flat `key = value` text format.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are
//! comma-separated. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::models::{Arch, ModelConfig};
use crate::objective::Prior;
use crate::optim::{AdamConfig, Schedule};
use crate::pruning::ScoreKind;
use crate::tickets::PipelineConfig;
use crate::train::TrainConfig;
use crate::variational::InitScheme;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Blobs,
    Moons,
    Patterns,
    Cifar10,
}

impl DatasetKind {
    fn name(self) -> &'static str {
        match self {
            Self::Blobs => "blobs",
            Self::Moons => "moons",
            Self::Patterns => "patterns",
            Self::Cifar10 => "cifar10",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(Self::Blobs),
            "moons" => Ok(Self::Moons),
            "patterns" => Ok(Self::Patterns),
            "cifar10" => Ok(Self::Cifar10),
            _ => Err(Error::invalid(format!("unknown dataset `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub arch: Arch,
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    pub in_channels: usize,
    pub num_classes: usize,
    pub bayesian: bool,
    pub score: ScoreKind,
    pub rate: f64,
    pub levels: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub samples: usize,
    pub eval_samples: usize,
    pub temperature: f64,
    pub prior_mu: f64,
    pub prior_sigma: f64,
    pub bins: usize,
    pub seed: u64,
    pub rewind_rho: bool,
    pub reinit_dist: InitScheme,
    pub augment: bool,
    pub dataset: DatasetKind,
    /// Training examples per class (total for moons, cap for cifar10; 0 = all).
    pub n_train: usize,
    pub n_test: usize,
    pub spread: f64,
    pub noise: f64,
    pub image_side: usize,
    pub data_seed: u64,
    pub cifar_dir: PathBuf,
    pub transplant_all: bool,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Mlp,
            widths: vec![2, 64, 64, 4],
            blocks: vec![1, 1],
            in_channels: 3,
            num_classes: 4,
            bayesian: true,
            score: ScoreKind::Snr,
            rate: 0.2,
            levels: 20,
            epochs: 160,
            base_lr: 0.001,
            milestones: vec![80, 120],
            gamma: 0.1,
            warmup_epochs: 0,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 128,
            samples: 10,
            eval_samples: 10,
            temperature: 0.1,
            prior_mu: 0.0,
            prior_sigma: 1.0,
            bins: 10,
            seed: 0,
            rewind_rho: true,
            reinit_dist: InitScheme::KaimingUniform,
            augment: false,
            dataset: DatasetKind::Blobs,
            n_train: 100,
            n_test: 250,
            spread: 0.6,
            noise: 0.5,
            image_side: 8,
            data_seed: 1,
            cifar_dir: PathBuf::from("cifar-10-batches-bin"),
            transplant_all: false,
            out: PathBuf::from("runs"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_with<T>(key: &str, value: &str, f: impl FnOnce(&str) -> Result<T>) -> Result<T> {
    f(value).map_err(|e| Error::config(key, e.to_string()))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn scheme_name(s: InitScheme) -> &'static str {
    match s {
        InitScheme::KaimingUniform => "uniform",
        InitScheme::KaimingNormal => "normal",
    }
}

impl ExperimentConfig {
    pub const KEYS: &'static [&'static str] = &[
        "arch", "widths", "blocks", "in_channels", "num_classes", "bayesian", "score", "rate", "levels",
        "epochs", "base_lr", "milestones", "gamma", "warmup_epochs", "weight_decay", "beta1", "beta2",
        "adam_eps", "batch_size", "samples", "eval_samples", "temperature", "prior_mu", "prior_sigma",
        "bins", "seed", "rewind_rho", "reinit_dist", "augment", "dataset", "n_train", "n_test", "spread",
        "noise", "image_side", "data_seed", "cifar_dir", "transplant_all", "out",
    ];

    /// Sets one key; the error names the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "arch" => self.arch = parse_with(key, v, str::parse)?,
            "widths" => self.widths = parse_list(key, v)?,
            "blocks" => self.blocks = parse_list(key, v)?,
            "in_channels" => self.in_channels = parse(key, v)?,
            "num_classes" => self.num_classes = parse(key, v)?,
            "bayesian" => self.bayesian = parse(key, v)?,
            "score" => self.score = parse_with(key, v, str::parse)?,
            "rate" => self.rate = parse(key, v)?,
            "levels" => self.levels = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "base_lr" => self.base_lr = parse(key, v)?,
            "milestones" => self.milestones = parse_list(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "samples" => self.samples = parse(key, v)?,
            "eval_samples" => self.eval_samples = parse(key, v)?,
            "temperature" => self.temperature = parse(key, v)?,
            "prior_mu" => self.prior_mu = parse(key, v)?,
            "prior_sigma" => self.prior_sigma = parse(key, v)?,
            "bins" => self.bins = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "rewind_rho" => self.rewind_rho = parse(key, v)?,
            "reinit_dist" => {
                self.reinit_dist = match v {
                    "uniform" => InitScheme::KaimingUniform,
                    "normal" => InitScheme::KaimingNormal,
                    _ => return Err(Error::config(key, format!("expected uniform or normal, got `{v}`"))),
                }
            }
            "augment" => self.augment = parse(key, v)?,
            "dataset" => self.dataset = parse_with(key, v, str::parse)?,
            "n_train" => self.n_train = parse(key, v)?,
            "n_test" => self.n_test = parse(key, v)?,
            "spread" => self.spread = parse(key, v)?,
            "noise" => self.noise = parse(key, v)?,
            "image_side" => self.image_side = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "cifar_dir" => self.cifar_dir = PathBuf::from(v),
            "transplant_all" => self.transplant_all = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    /// Every key, one per line, in a form [`Self::parse_str`] reads back exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("arch", self.arch.to_string());
        kv("widths", join(&self.widths));
        kv("blocks", join(&self.blocks));
        kv("in_channels", self.in_channels.to_string());
        kv("num_classes", self.num_classes.to_string());
        kv("bayesian", self.bayesian.to_string());
        kv("score", self.score.to_string());
        kv("rate", self.rate.to_string());
        kv("levels", self.levels.to_string());
        kv("epochs", self.epochs.to_string());
        kv("base_lr", self.base_lr.to_string());
        kv("milestones", join(&self.milestones));
        kv("gamma", self.gamma.to_string());
        kv("warmup_epochs", self.warmup_epochs.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("adam_eps", self.adam_eps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("samples", self.samples.to_string());
        kv("eval_samples", self.eval_samples.to_string());
        kv("temperature", self.temperature.to_string());
        kv("prior_mu", self.prior_mu.to_string());
        kv("prior_sigma", self.prior_sigma.to_string());
        kv("bins", self.bins.to_string());
        kv("seed", self.seed.to_string());
        kv("rewind_rho", self.rewind_rho.to_string());
        kv("reinit_dist", scheme_name(self.reinit_dist).to_string());
        kv("augment", self.augment.to_string());
        kv("dataset", self.dataset.name().to_string());
        kv("n_train", self.n_train.to_string());
        kv("n_test", self.n_test.to_string());
        kv("spread", self.spread.to_string());
        kv("noise", self.noise.to_string());
        kv("image_side", self.image_side.to_string());
        kv("data_seed", self.data_seed.to_string());
        kv("cifar_dir", self.cifar_dir.display().to_string());
        kv("transplant_all", self.transplant_all.to_string());
        kv("out", self.out.display().to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: usize| {
            if v == 0 {
                Err(Error::config(key, "must be at least 1"))
            } else {
                Ok(())
            }
        };
        positive("epochs", self.epochs)?;
        positive("batch_size", self.batch_size)?;
        positive("samples", self.samples)?;
        positive("eval_samples", self.eval_samples)?;
        positive("bins", self.bins)?;
        positive("num_classes", self.num_classes)?;
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return Err(Error::config("rate", "must lie in (0, 1)"));
        }
        if !(self.prior_sigma > 0.0) {
            return Err(Error::config("prior_sigma", "must be positive"));
        }
        if !(self.base_lr >= 0.0) {
            return Err(Error::config("base_lr", "must be non-negative"));
        }
        if self.temperature < 0.0 {
            return Err(Error::config("temperature", "must be non-negative"));
        }
        if !self.bayesian && self.score == ScoreKind::Snr {
            return Err(Error::config("score", "snr needs a Bayesian model"));
        }
        if self.arch == Arch::Mlp && self.widths.last() != Some(&self.num_classes) {
            return Err(Error::config("widths", "last width must equal num_classes"));
        }
        self.model()
            .validate()
            .map_err(|e| Error::config(if self.arch == Arch::Mlp { "widths" } else { "blocks" }, e.to_string()))
    }

    pub fn model(&self) -> ModelConfig {
        match self.arch {
            Arch::Mlp => ModelConfig::mlp(&self.widths, self.bayesian),
            Arch::MiniResnet => ModelConfig::mini_resnet(
                self.in_channels,
                &self.widths,
                &self.blocks,
                self.num_classes,
                self.bayesian,
            ),
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            base_lr: self.base_lr,
            milestones: self.milestones.clone(),
            gamma: self.gamma,
            warmup_epochs: self.warmup_epochs,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule: self.schedule(),
            adam: AdamConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
            },
            samples: self.samples,
            eval_samples: self.eval_samples,
            temperature: self.temperature,
            prior: Prior {
                mu: self.prior_mu,
                sigma: self.prior_sigma,
            },
            bins: self.bins,
            augment: self.augment,
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            model: self.model(),
            train: self.train(),
            levels: self.levels,
            rate: self.rate,
            score: self.score,
            rewind_rho: self.rewind_rho,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip_is_lossless() {
        let mut cfg = ExperimentConfig::default();
        cfg.base_lr = 0.003;
        cfg.spread = 0.1 + 0.2;
        cfg.milestones = vec![4, 6];
        cfg.reinit_dist = InitScheme::KaimingNormal;
        assert_eq!(ExperimentConfig::parse_str(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_and_bad_keys_are_named() {
        match ExperimentConfig::parse_str("bogus = 1") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "bogus"),
            other => panic!("{other:?}"),
        }
        match ExperimentConfig::parse_str("rate = 1.5") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "rate"),
            other => panic!("{other:?}"),
        }
        match ExperimentConfig::parse_str("epochs = many") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "epochs"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn every_key_is_settable() {
        let text = ExperimentConfig::default().to_text();
        let keys: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        assert_eq!(keys, ExperimentConfig::KEYS);
    }
}
