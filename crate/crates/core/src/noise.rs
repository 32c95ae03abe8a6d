//! Synthetic label noise with known transition matrices, and scoring of a
//! noise detector against the ground-truth flip mask.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gmm::NoiseFlags;
use crate::rng::{self, tags};
use crate::transition::TransitionMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// Flip uniformly to one of the other `C - 1` classes.
    Symmetric,
    /// Flip to the next class, `(l + 1) mod C`.
    Pair,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symmetric" | "sym" => Ok(NoiseKind::Symmetric),
            "pair" => Ok(NoiseKind::Pair),
            other => Err(Error::arg(format!("unknown noise kind {other:?} (symmetric|pair)"))),
        }
    }
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseKind::Symmetric => "symmetric",
            NoiseKind::Pair => "pair",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
}

impl NoiseSpec {
    pub fn symmetric(rate: f64) -> Self {
        Self {
            kind: NoiseKind::Symmetric,
            rate,
        }
    }

    pub fn pair(rate: f64) -> Self {
        Self {
            kind: NoiseKind::Pair,
            rate,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if num_classes < 2 {
            return Err(Error::arg(format!("noise needs at least 2 classes, got {num_classes}")));
        }
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::arg(format!("noise rate {} not in [0, 1)", self.rate)));
        }
        if self.kind == NoiseKind::Symmetric {
            let limit = (num_classes - 1) as f64 / num_classes as f64;
            if self.rate >= limit {
                return Err(Error::arg(format!(
                    "symmetric rate {} must stay below (C-1)/C = {limit}",
                    self.rate
                )));
            }
        }
        Ok(())
    }
}

/// The transition matrix that generates `spec` noise over `num_classes` classes.
pub fn ground_truth_matrix(spec: NoiseSpec, num_classes: usize) -> Result<TransitionMatrix> {
    spec.validate(num_classes)?;
    let c = num_classes;
    let r = spec.rate;
    let mut t = Array2::zeros((c, c));
    for l in 0..c {
        t[[l, l]] = 1.0 - r;
        match spec.kind {
            NoiseKind::Symmetric => {
                for k in (0..c).filter(|&k| k != l) {
                    t[[l, k]] = r / (c - 1) as f64;
                }
            }
            NoiseKind::Pair => t[[l, (l + 1) % c]] = r,
        }
    }
    TransitionMatrix::new(t)
}

/// Resamples every observed label from the ground-truth row of its clean label.
pub fn inject_noise(ds: &Dataset, spec: NoiseSpec, seed: u64) -> Result<Dataset> {
    let clean = ds
        .clean_labels()
        .ok_or_else(|| Error::State("noise injection needs clean labels".into()))?;
    let t = ground_truth_matrix(spec, ds.num_classes())?;
    let mut rng = rng::stream(seed, tags::NOISE, 0);
    let observed = clean
        .iter()
        .map(|&y| sample_row(t.row(y), rng.random::<f64>()))
        .collect();
    ds.relabeled(observed)
}

fn sample_row(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // u landed in the rounding slack above the last partial sum
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

/// Confusion counts of a detector; the positive class is "label is noisy".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub balanced_accuracy: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

/// Scores flags against the flip mask.
///
/// Ratios with an empty denominator are 0, except that a detector raising no
/// flags on a noise-free mask scores 1 everywhere. Balanced accuracy averages
/// the rates that are defined.
pub fn score_detection(flip_mask: &[bool], flags: &NoiseFlags) -> Result<DetectionScore> {
    let b = flags.as_slice();
    if b.len() != flip_mask.len() {
        return Err(Error::arg(format!(
            "flip mask has {} entries but flags have {}",
            flip_mask.len(),
            b.len()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&truth, &flag) in flip_mask.iter().zip(b) {
        match (truth, flag) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { None } else { Some(num as f64 / den as f64) };
    let vacuous = tp + fp + fn_ == 0;
    let precision = ratio(tp, tp + fp).unwrap_or(if vacuous { 1.0 } else { 0.0 });
    let recall_opt = ratio(tp, tp + fn_);
    let recall = recall_opt.unwrap_or(if vacuous { 1.0 } else { 0.0 });
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let balanced_accuracy = match (recall_opt, ratio(tn, tn + fp)) {
        (Some(tpr), Some(tnr)) => 0.5 * (tpr + tnr),
        (Some(r), None) | (None, Some(r)) => r,
        (None, None) => 0.0,
    };
    Ok(DetectionScore {
        precision,
        recall,
        f1,
        balanced_accuracy,
        tp,
        fp,
        fn_,
        tn,
    })
}
