//! Stage one: cross-entropy training under a cyclic learning rate while
//! recording every sample's loss after each epoch.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{ce_loss_per_sample, Model, Sgd, Target};
use crate::rng::{self, tags};

/// Rows per chunk in evaluation passes.
pub(crate) const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CycleShape {
    /// Linear descent from `lr_max` to `lr_min` over the cycle, then reset.
    Sawtooth,
    /// Linear descent to `lr_min` at mid-cycle and back up.
    Triangular,
}

impl std::str::FromStr for CycleShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sawtooth" => Ok(CycleShape::Sawtooth),
            "triangular" => Ok(CycleShape::Triangular),
            other => Err(Error::arg(format!("unknown cycle shape {other:?} (sawtooth|triangular)"))),
        }
    }
}

impl std::fmt::Display for CycleShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CycleShape::Sawtooth => "sawtooth",
            CycleShape::Triangular => "triangular",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CyclicSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub cycle_epochs: usize,
    pub shape: CycleShape,
}

impl Default for CyclicSchedule {
    fn default() -> Self {
        Self {
            lr_max: 1e-2,
            lr_min: 1e-3,
            cycle_epochs: 10,
            shape: CycleShape::Sawtooth,
        }
    }
}

impl CyclicSchedule {
    pub fn sawtooth(lr_max: f64, lr_min: f64, cycle_epochs: usize) -> Result<Self> {
        let s = Self {
            lr_max,
            lr_min,
            cycle_epochs,
            shape: CycleShape::Sawtooth,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max > 0.0 && self.lr_min > 0.0 && self.lr_min < self.lr_max) {
            return Err(Error::arg(format!(
                "cyclic schedule needs 0 < lr_min < lr_max, got lr_min={} lr_max={}",
                self.lr_min, self.lr_max
            )));
        }
        if self.cycle_epochs == 0 {
            return Err(Error::arg("cycle_epochs must be positive"));
        }
        Ok(())
    }

    /// Learning rate for `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.cycle_epochs == 1 {
            return self.lr_max;
        }
        let pos = epoch % self.cycle_epochs;
        let span = (self.cycle_epochs - 1) as f64;
        let frac = match self.shape {
            CycleShape::Sawtooth => pos as f64 / span,
            CycleShape::Triangular => {
                let x = pos as f64 / span;
                1.0 - (2.0 * x - 1.0).abs()
            }
        };
        self.lr_max - frac * (self.lr_max - self.lr_min)
    }
}

/// Per-sample losses, `N x E` (samples by recorded epochs).
#[derive(Debug, Clone, PartialEq)]
pub struct LossHistory(Array2<f64>);

impl LossHistory {
    pub fn from_array(a: Array2<f64>) -> Result<Self> {
        if a.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Validation("loss history entries must be finite and non-negative".into()));
        }
        Ok(Self(a))
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn num_samples(&self) -> usize {
        self.0.nrows()
    }

    pub fn num_epochs(&self) -> usize {
        self.0.ncols()
    }

    /// Mean loss over all samples for every epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        self.0.mean_axis(Axis(0)).map(|m| m.to_vec()).unwrap_or_default()
    }

    /// CSV with columns `sample_index,epoch,loss`, sample-major.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "sample_index,epoch,loss").map_err(io)?;
        for (n, row) in self.0.rows().into_iter().enumerate() {
            for (e, v) in row.iter().enumerate() {
                writeln!(w, "{n},{e},{v:?}").map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Validation(format!("{other:?}")),
        })?;
        let mut triples = Vec::new();
        let (mut n_max, mut e_max) = (0usize, 0usize);
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let field = |j: usize, name: &str| -> Result<&str> {
                rec.get(j).ok_or_else(|| Error::Parse {
                    row: i + 2,
                    column: name.into(),
                    message: "missing field".into(),
                })
            };
            let parse_err = |name: &str| Error::Parse {
                row: i + 2,
                column: name.into(),
                message: "not a number".into(),
            };
            let n: usize = field(0, "sample_index")?.trim().parse().map_err(|_| parse_err("sample_index"))?;
            let e: usize = field(1, "epoch")?.trim().parse().map_err(|_| parse_err("epoch"))?;
            let v: f64 = field(2, "loss")?.trim().parse().map_err(|_| parse_err("loss"))?;
            n_max = n_max.max(n + 1);
            e_max = e_max.max(e + 1);
            triples.push((n, e, v));
        }
        if triples.len() != n_max * e_max {
            return Err(Error::Consistency(format!(
                "{} rows do not fill a {n_max} x {e_max} history",
                triples.len()
            )));
        }
        let mut a = Array2::from_elem((n_max, e_max), f64::NAN);
        for (n, e, v) in triples {
            a[[n, e]] = v;
        }
        Self::from_array(a)
    }
}

/// Per-sample aggregate loss `ℓ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSummary(Vec<f64>);

impl LossSummary {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Validation("aggregate losses must be finite and non-negative".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// `ℓ_n` = mean of `history[n, e]` over `e >= burn_in_epochs`.
pub fn aggregate_losses(history: &LossHistory, burn_in_epochs: usize) -> Result<LossSummary> {
    let e = history.num_epochs();
    if burn_in_epochs >= e {
        return Err(Error::arg(format!(
            "burn-in of {burn_in_epochs} epochs leaves nothing of a {e}-epoch history"
        )));
    }
    let kept = history.0.slice(ndarray::s![.., burn_in_epochs..]);
    let means = kept.mean_axis(Axis(1)).expect("non-empty");
    LossSummary::new(means.to_vec())
}

/// Per-sample CE losses of `model` on the whole dataset, no updates.
pub fn eval_losses(model: &Model, features: &Array2<f64>, labels: &[usize]) -> Result<Vec<f64>> {
    let probs = model.forward_chunked(features.view(), EVAL_CHUNK)?;
    ce_loss_per_sample(&probs, labels)
}

/// Per-epoch learning rate.
pub trait LrSchedule {
    fn lr_at(&self, epoch: usize) -> f64;
}

impl LrSchedule for CyclicSchedule {
    fn lr_at(&self, epoch: usize) -> f64 {
        CyclicSchedule::lr_at(self, epoch)
    }
}

/// The same rate every epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantLr(pub f64);

impl LrSchedule for ConstantLr {
    fn lr_at(&self, _epoch: usize) -> f64 {
        self.0
    }
}

/// Loop settings of the pre-training stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

/// Trains with cross-entropy on the observed labels, the learning rate
/// following `schedule` per epoch. After every epoch a full evaluation pass
/// records each sample's loss into the history.
pub fn pretrain(
    mut model: Model,
    ds: &Dataset,
    schedule: &impl LrSchedule,
    opts: &PretrainOptions,
) -> Result<(Model, LossHistory)> {
    if opts.epochs == 0 {
        return Err(Error::arg("pre-training needs at least one epoch"));
    }
    if opts.batch_size == 0 {
        return Err(Error::arg("batch size must be positive"));
    }
    let n = ds.len();
    let labels = ds.observed_labels();
    let features = ds.features();
    let mut opt = Sgd::new(opts.momentum)?;
    let mut history = Array2::zeros((n, opts.epochs));
    let ones = vec![1.0; opts.batch_size];
    for epoch in 0..opts.epochs {
        let lr = schedule.lr_at(epoch);
        let order = rng::epoch_permutation(n, rng::derive_seed(opts.seed, tags::PRETRAIN, 0), epoch);
        for idx in order.chunks(opts.batch_size) {
            let x = features.select(Axis(0), idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let grads = model.backward(x.view(), &ones[..idx.len()], Target::Labels(&y))?;
            opt.step(&mut model, &grads, lr)?;
        }
        let losses = eval_losses(&model, features, labels)?;
        history.column_mut(epoch).assign(&ndarray::Array1::from(losses));
    }
    Ok((model, LossHistory::from_array(history)?))
}
