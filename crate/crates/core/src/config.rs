//! Experiment configuration and its flat `section.key = value` text form.
//!
//! ```text
//! # comments start with '#'
//! data.source = mnist
//! noise.rate = 0.5
//! pretrain.epochs = 50
//! ```
//!
//! Unknown keys are rejected; missing keys keep their defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{NoiseKind, NoiseSpec};
use crate::pretrain::{CycleShape, CyclicSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Blobs,
    Mnist,
    Csv,
}

impl std::str::FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(DataSource::Blobs),
            "mnist" => Ok(DataSource::Mnist),
            "csv" => Ok(DataSource::Csv),
            other => Err(Error::Config(format!("unknown data source {other:?} (blobs|mnist|csv)"))),
        }
    }
}

impl std::fmt::Display for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DataSource::Blobs => "blobs",
            DataSource::Mnist => "mnist",
            DataSource::Csv => "csv",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    /// Blobs and CSV only; MNIST always has 10.
    pub num_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub separation: f64,
    /// Share of the pool used for training when no separate test file exists.
    pub train_fraction: f64,
    pub mnist_dir: PathBuf,
    /// Keep only the first `n` training (test) samples.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub csv_path: Option<PathBuf>,
    pub csv_test_path: Option<PathBuf>,
    pub label_column: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub cycle_epochs: usize,
    pub shape: CycleShape,
    /// Epochs dropped before averaging; `None` means one full cycle.
    pub burn_in: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_transition: f64,
    pub blend: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    pub max_iter: usize,
    pub tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ablation {
    /// Apply the transition matrix to every sample.
    pub no_selective: bool,
    /// Start from the blended uniform matrix instead of counting.
    pub no_init: bool,
    /// Plain cross-entropy from a fresh model; no stage one, no correction.
    pub baseline_ce: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub noise: NoiseSpec,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub gmm: GmmConfig,
    pub ablation: Ablation,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig {
                source: DataSource::Blobs,
                num_classes: 4,
                per_class: 250,
                dim: 10,
                separation: 4.0,
                train_fraction: 0.8,
                mnist_dir: PathBuf::from("data/mnist"),
                train_limit: None,
                test_limit: None,
                csv_path: None,
                csv_test_path: None,
                label_column: "label".into(),
            },
            noise: NoiseSpec::symmetric(0.2),
            model: ModelConfig { hidden: vec![256, 128] },
            pretrain: PretrainConfig {
                epochs: 50,
                batch_size: 128,
                momentum: 0.9,
                lr_max: 1e-2,
                lr_min: 1e-3,
                cycle_epochs: 10,
                shape: CycleShape::Sawtooth,
                burn_in: None,
            },
            train: TrainConfig {
                epochs: 40,
                batch_size: 128,
                lr: 1e-2,
                momentum: 0.9,
                lr_transition: 1e-4,
                blend: 0.01,
            },
            gmm: GmmConfig {
                max_iter: 500,
                tol: 1e-8,
            },
            ablation: Ablation::default(),
        }
    }
}

/// Every accepted key, in the order [`ExperimentConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "seed",
    "data.source",
    "data.num_classes",
    "data.per_class",
    "data.dim",
    "data.separation",
    "data.train_fraction",
    "data.mnist_dir",
    "data.train_limit",
    "data.test_limit",
    "data.csv_path",
    "data.csv_test_path",
    "data.label_column",
    "noise.kind",
    "noise.rate",
    "model.hidden",
    "pretrain.epochs",
    "pretrain.batch_size",
    "pretrain.momentum",
    "pretrain.lr_max",
    "pretrain.lr_min",
    "pretrain.cycle_epochs",
    "pretrain.shape",
    "pretrain.burn_in",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.momentum",
    "train.lr_transition",
    "train.blend",
    "gmm.max_iter",
    "gmm.tol",
    "ablation.no_selective",
    "ablation.no_init",
    "ablation.baseline_ce",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value {value:?} for {key}: {e}")))
}

fn parse_opt<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match value {
        "" | "none" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        v => Err(Error::Config(format!("bad value {v:?} for {key}: expected true or false"))),
    }
}

fn opt_text<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |v| v.to_string())
}

fn path_text(v: &Option<PathBuf>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl ExperimentConfig {
    /// Sets one dotted key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (d, p, t) = (&mut self.data, &mut self.pretrain, &mut self.train);
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.source" => d.source = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "data.num_classes" => d.num_classes = parse(key, v)?,
            "data.per_class" => d.per_class = parse(key, v)?,
            "data.dim" => d.dim = parse(key, v)?,
            "data.separation" => d.separation = parse(key, v)?,
            "data.train_fraction" => d.train_fraction = parse(key, v)?,
            "data.mnist_dir" => d.mnist_dir = PathBuf::from(v),
            "data.train_limit" => d.train_limit = parse_opt(key, v)?,
            "data.test_limit" => d.test_limit = parse_opt(key, v)?,
            "data.csv_path" => d.csv_path = parse_opt(key, v)?,
            "data.csv_test_path" => d.csv_test_path = parse_opt(key, v)?,
            "data.label_column" => d.label_column = v.to_string(),
            "noise.kind" => self.noise.kind = parse::<NoiseKind>(key, v)?,
            "noise.rate" => self.noise.rate = parse(key, v)?,
            "model.hidden" => {
                self.model.hidden = if v.is_empty() || v == "none" {
                    Vec::new()
                } else {
                    v.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?
                }
            }
            "pretrain.epochs" => p.epochs = parse(key, v)?,
            "pretrain.batch_size" => p.batch_size = parse(key, v)?,
            "pretrain.momentum" => p.momentum = parse(key, v)?,
            "pretrain.lr_max" => p.lr_max = parse(key, v)?,
            "pretrain.lr_min" => p.lr_min = parse(key, v)?,
            "pretrain.cycle_epochs" => p.cycle_epochs = parse(key, v)?,
            "pretrain.shape" => p.shape = parse::<CycleShape>(key, v)?,
            "pretrain.burn_in" => p.burn_in = parse_opt(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.momentum" => t.momentum = parse(key, v)?,
            "train.lr_transition" => t.lr_transition = parse(key, v)?,
            "train.blend" => t.blend = parse(key, v)?,
            "gmm.max_iter" => self.gmm.max_iter = parse(key, v)?,
            "gmm.tol" => self.gmm.tol = parse(key, v)?,
            "ablation.no_selective" => self.ablation.no_selective = parse_bool(key, v)?,
            "ablation.no_init" => self.ablation.no_init = parse_bool(key, v)?,
            "ablation.baseline_ce" => self.ablation.baseline_ce = parse_bool(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Parses the text form on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            cfg.set(k.trim(), v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                e => e,
            })?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// The text form; [`ExperimentConfig::from_text`] reads it back unchanged.
    pub fn to_text(&self) -> String {
        let d = &self.data;
        let p = &self.pretrain;
        let t = &self.train;
        let hidden: Vec<String> = self.model.hidden.iter().map(|h| h.to_string()).collect();
        let values: Vec<String> = vec![
            self.seed.to_string(),
            d.source.to_string(),
            d.num_classes.to_string(),
            d.per_class.to_string(),
            d.dim.to_string(),
            format!("{:?}", d.separation),
            format!("{:?}", d.train_fraction),
            d.mnist_dir.display().to_string(),
            opt_text(&d.train_limit),
            opt_text(&d.test_limit),
            path_text(&d.csv_path),
            path_text(&d.csv_test_path),
            d.label_column.clone(),
            self.noise.kind.to_string(),
            format!("{:?}", self.noise.rate),
            if hidden.is_empty() { "none".into() } else { hidden.join(",") },
            p.epochs.to_string(),
            p.batch_size.to_string(),
            format!("{:?}", p.momentum),
            format!("{:?}", p.lr_max),
            format!("{:?}", p.lr_min),
            p.cycle_epochs.to_string(),
            p.shape.to_string(),
            opt_text(&p.burn_in),
            t.epochs.to_string(),
            t.batch_size.to_string(),
            format!("{:?}", t.lr),
            format!("{:?}", t.momentum),
            format!("{:?}", t.lr_transition),
            format!("{:?}", t.blend),
            self.gmm.max_iter.to_string(),
            format!("{:?}", self.gmm.tol),
            self.ablation.no_selective.to_string(),
            self.ablation.no_init.to_string(),
            self.ablation.baseline_ce.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn schedule(&self) -> CyclicSchedule {
        CyclicSchedule {
            lr_max: self.pretrain.lr_max,
            lr_min: self.pretrain.lr_min,
            cycle_epochs: self.pretrain.cycle_epochs,
            shape: self.pretrain.shape,
        }
    }

    pub fn burn_in(&self) -> usize {
        self.pretrain.burn_in.unwrap_or(self.pretrain.cycle_epochs)
    }

    /// Checks ranges and cross-field rules; every failure is a config error.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let d = &self.data;
        match d.source {
            DataSource::Blobs => {
                if d.num_classes < 2 || d.per_class == 0 || d.dim == 0 {
                    return bad("blobs need num_classes >= 2, per_class >= 1, dim >= 1".into());
                }
                if !(d.separation > 0.0) {
                    return bad(format!("data.separation must be positive, got {}", d.separation));
                }
            }
            DataSource::Csv => {
                if d.csv_path.is_none() {
                    return bad("data.source = csv needs data.csv_path".into());
                }
                if d.num_classes < 2 {
                    return bad("csv data needs num_classes >= 2".into());
                }
            }
            DataSource::Mnist => {}
        }
        if d.source != DataSource::Csv && (d.csv_path.is_some() || d.csv_test_path.is_some()) {
            return bad(format!("csv paths given but data.source = {}", d.source));
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return bad(format!("data.train_fraction must lie in (0, 1), got {}", d.train_fraction));
        }
        if d.train_limit == Some(0) || d.test_limit == Some(0) {
            return bad("sample limits must be positive".into());
        }
        let classes = if d.source == DataSource::Mnist { 10 } else { d.num_classes };
        self.noise
            .validate(classes)
            .map_err(|e| Error::Config(format!("noise: {e}")))?;
        if self.model.hidden.contains(&0) {
            return bad("model.hidden sizes must be positive".into());
        }
        let p = &self.pretrain;
        if p.epochs == 0 || p.batch_size == 0 {
            return bad("pretrain.epochs and pretrain.batch_size must be positive".into());
        }
        self.schedule()
            .validate()
            .map_err(|e| Error::Config(format!("pretrain schedule: {e}")))?;
        if self.burn_in() >= p.epochs {
            return bad(format!(
                "burn-in of {} epochs leaves nothing of {} pre-training epochs",
                self.burn_in(),
                p.epochs
            ));
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return bad("train.epochs and train.batch_size must be positive".into());
        }
        if !(t.lr > 0.0) || !(t.lr_transition > 0.0) {
            return bad("train.lr and train.lr_transition must be positive".into());
        }
        for (name, m) in [("pretrain.momentum", p.momentum), ("train.momentum", t.momentum)] {
            if !(0.0..1.0).contains(&m) {
                return bad(format!("{name} must lie in [0, 1), got {m}"));
            }
        }
        if !(t.blend > 0.0 && t.blend < 1.0) {
            return bad(format!("train.blend must lie in (0, 1), got {}", t.blend));
        }
        if self.gmm.max_iter == 0 || !(self.gmm.tol >= 0.0) {
            return bad("gmm.max_iter must be positive and gmm.tol non-negative".into());
        }
        let a = &self.ablation;
        if a.baseline_ce && (a.no_selective || a.no_init) {
            return bad("ablation.baseline_ce excludes the other ablation switches".into());
        }
        Ok(())
    }
}
