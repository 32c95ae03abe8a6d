//! Two-component 1-D Gaussian mixture over per-sample losses, the
//! sensitivity/specificity threshold built on it, and the resulting binary
//! noise indicator.

use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const LAMBDA_MIN: f64 = 1e-4;
pub const LAMBDA_MAX: f64 = 1.0 - 1e-4;
/// Points in the threshold search grid.
pub const THRESHOLD_GRID: usize = 10_001;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// `λ N(μ1, σ1²) + (1-λ) N(μ2, σ2²)`, component 1 being the clean one.
/// Always canonical: `mu1 <= mu2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gmm2 {
    pub lambda: f64,
    pub mu1: f64,
    pub sigma1_sq: f64,
    pub mu2: f64,
    pub sigma2_sq: f64,
}

impl Gmm2 {
    /// Canonicalizes (lower mean first), floors variances and clamps `λ`.
    pub fn new(lambda: f64, mu1: f64, sigma1_sq: f64, mu2: f64, sigma2_sq: f64) -> Self {
        let (lambda, mu1, sigma1_sq, mu2, sigma2_sq) = if mu1 <= mu2 {
            (lambda, mu1, sigma1_sq, mu2, sigma2_sq)
        } else {
            (1.0 - lambda, mu2, sigma2_sq, mu1, sigma1_sq)
        };
        Self {
            lambda: lambda.clamp(LAMBDA_MIN, LAMBDA_MAX),
            mu1,
            sigma1_sq: sigma1_sq.max(VARIANCE_FLOOR),
            mu2,
            sigma2_sq: sigma2_sq.max(VARIANCE_FLOOR),
        }
    }

    pub fn sigma1(&self) -> f64 {
        self.sigma1_sq.sqrt()
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2_sq.sqrt()
    }

    /// No detectable noise: `μ2 - μ1 < 0.5 sqrt(max(σ1², σ2²))`.
    pub fn is_degenerate(&self) -> bool {
        self.mu2 - self.mu1 < 0.5 * self.sigma1_sq.max(self.sigma2_sq).sqrt()
    }

    /// Mixture log-density summed over `xs`.
    pub fn log_likelihood(&self, xs: &[f64]) -> f64 {
        xs.iter().map(|&x| self.log_components(x).2).sum()
    }

    /// `(ln λN1(x), ln (1-λ)N2(x), ln g(x))`.
    fn log_components(&self, x: f64) -> (f64, f64, f64) {
        let a = self.lambda.ln() + log_normal(x, self.mu1, self.sigma1_sq);
        let b = (1.0 - self.lambda).ln() + log_normal(x, self.mu2, self.sigma2_sq);
        let m = a.max(b);
        (a, b, m + ((a - m).exp() + (b - m).exp()).ln())
    }
}

fn log_normal(x: f64, mu: f64, var: f64) -> f64 {
    -0.5 * (x - mu).powi(2) / var - 0.5 * var.ln() - LN_SQRT_2PI
}

fn normal_pdf(x: f64, mu: f64, var: f64) -> f64 {
    log_normal(x, mu, var).exp()
}

/// Standard normal CDF.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Result of an EM run.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub gmm: Gmm2,
    /// Total log-likelihood at the initial guess and after every iteration.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// A component variance hit the floor at the final iteration.
    pub variance_floored: bool,
}

/// Weighted moments of one component; `None` if it carries no mass.
fn weighted_moments(xs: &[f64], resp: impl Iterator<Item = f64> + Clone) -> Option<(f64, f64, f64)> {
    let w: f64 = resp.clone().sum();
    if w <= f64::MIN_POSITIVE {
        return None;
    }
    let mean = resp.clone().zip(xs).map(|(r, x)| r * x).sum::<f64>() / w;
    let var = resp.zip(xs).map(|(r, x)| r * (x - mean).powi(2)).sum::<f64>() / w;
    Some((w, mean, var))
}

/// Fits the mixture by EM.
///
/// Initialization splits the sorted losses at the median and takes each
/// half's moments. Iteration stops once the per-sample log-likelihood gain
/// drops below `tol`, or after `max_iter` iterations.
pub fn fit_em(losses: &[f64], max_iter: usize, tol: f64) -> Result<GmmFit> {
    let n = losses.len();
    if n < 4 {
        return Err(Error::arg(format!("need at least 4 losses for a two-component fit, got {n}")));
    }
    if losses.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("losses must be finite"));
    }
    let first = losses[0];
    if losses.iter().all(|&v| v == first) {
        return Err(Error::Degenerate(format!("all {n} losses equal {first}")));
    }

    let mut sorted = losses.to_vec();
    sorted.sort_by(f64::total_cmp);
    let half = n / 2;
    let moments = |s: &[f64]| {
        let m = s.iter().sum::<f64>() / s.len() as f64;
        (m, s.iter().map(|x| (x - m).powi(2)).sum::<f64>() / s.len() as f64)
    };
    let (m1, v1) = moments(&sorted[..half]);
    let (m2, v2) = moments(&sorted[half..]);
    let mut gmm = Gmm2::new(half as f64 / n as f64, m1, v1, m2, v2);

    let mut trace = vec![gmm.log_likelihood(losses)];
    let mut resp = vec![0.0; n];
    let mut converged = false;
    let mut iterations = 0;
    let mut floored = false;
    while iterations < max_iter {
        // E-step
        for (r, &x) in resp.iter_mut().zip(losses) {
            let (a, _, total) = gmm.log_components(x);
            *r = (a - total).exp();
        }
        // M-step
        let clean = weighted_moments(losses, resp.iter().copied());
        let noisy = weighted_moments(losses, resp.iter().map(|r| 1.0 - r));
        let (mu1, var1) = clean.map_or((gmm.mu1, VARIANCE_FLOOR), |(_, m, v)| (m, v));
        let (mu2, var2) = noisy.map_or((gmm.mu2, VARIANCE_FLOOR), |(_, m, v)| (m, v));
        let lambda = clean.map_or(0.0, |(w, _, _)| w) / n as f64;
        floored = var1 < VARIANCE_FLOOR || var2 < VARIANCE_FLOOR;
        // keep component identities fixed during iteration; canonicalize at the end
        gmm = Gmm2 {
            lambda: lambda.clamp(LAMBDA_MIN, LAMBDA_MAX),
            mu1,
            sigma1_sq: var1.max(VARIANCE_FLOOR),
            mu2,
            sigma2_sq: var2.max(VARIANCE_FLOOR),
        };
        iterations += 1;
        let ll = gmm.log_likelihood(losses);
        let gain = (ll - trace.last().unwrap()) / n as f64;
        trace.push(ll);
        if gain < tol {
            converged = true;
            break;
        }
    }
    let g = gmm;
    Ok(GmmFit {
        gmm: Gmm2::new(g.lambda, g.mu1, g.sigma1_sq, g.mu2, g.sigma2_sq),
        log_likelihood: trace,
        iterations,
        converged,
        variance_floored: floored,
    })
}

/// `λ N(x; μ1, σ1²)`.
pub fn clean_pdf(g: &Gmm2, x: f64) -> f64 {
    g.lambda * normal_pdf(x, g.mu1, g.sigma1_sq)
}

/// `(1-λ) N(x; μ2, σ2²)`.
pub fn noisy_pdf(g: &Gmm2, x: f64) -> f64 {
    (1.0 - g.lambda) * normal_pdf(x, g.mu2, g.sigma2_sq)
}

/// TP/(TP+FN) with the λ-weighted integrals: `Φ((t-μ1)/σ1)`.
pub fn sensitivity(g: &Gmm2, t: f64) -> f64 {
    std_normal_cdf((t - g.mu1) / g.sigma1())
}

/// TN/(TN+FP): `1 - Φ((t-μ2)/σ2)`.
pub fn specificity(g: &Gmm2, t: f64) -> f64 {
    std_normal_cdf(-(t - g.mu2) / g.sigma2())
}

pub fn balanced_accuracy(g: &Gmm2, t: f64) -> f64 {
    0.5 * (sensitivity(g, t) + specificity(g, t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub t: f64,
    pub balanced_accuracy: f64,
}

/// Maximizes `(SEN + SPC) / 2` over 10,001 evenly spaced points spanning
/// `[min loss, max loss]`; ties resolve to the smallest `t`.
pub fn optimal_threshold(g: &Gmm2, losses: &[f64]) -> Result<Threshold> {
    if g.is_degenerate() {
        return Err(Error::Degenerate(format!(
            "mixture components overlap (mu1={}, mu2={}); treat every sample as clean",
            g.mu1, g.mu2
        )));
    }
    if losses.is_empty() {
        return Err(Error::arg("no losses to span the threshold grid"));
    }
    let lo = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(grid_search(g, lo, hi, THRESHOLD_GRID))
}

pub(crate) fn grid_search(g: &Gmm2, lo: f64, hi: f64, points: usize) -> Threshold {
    let steps = (points - 1).max(1) as f64;
    let mut best = Threshold {
        t: lo,
        balanced_accuracy: balanced_accuracy(g, lo),
    };
    for i in 1..points {
        let t = lo + (hi - lo) * (i as f64 / steps);
        let ba = balanced_accuracy(g, t);
        if ba > best.balanced_accuracy {
            best = Threshold { t, balanced_accuracy: ba };
        }
    }
    best
}

/// Binary indicator `b`, true where a sample is flagged noisy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseFlags(Vec<bool>);

impl NoiseFlags {
    pub fn all_clean(n: usize) -> Self {
        Self(vec![false; n])
    }

    pub fn all_noisy(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.0.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.0.len() as f64
        }
    }

    /// CSV with header `sample_index,b` and `b` in {0,1}.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["sample_index", "b"])?;
        for (i, &b) in self.0.iter().enumerate() {
            w.write_record([i.to_string(), u8::from(b).to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path.as_ref())?;
        let mut flags = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let parse_err = |column: &str, message: String| Error::Parse {
                row: row + 2,
                column: column.into(),
                message,
            };
            let idx: usize = rec
                .get(0)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|e| parse_err("sample_index", format!("{e}")))?;
            if idx != flags.len() {
                return Err(parse_err("sample_index", format!("expected {}, found {idx}", flags.len())));
            }
            match rec.get(1).map(str::trim) {
                Some("0") => flags.push(false),
                Some("1") => flags.push(true),
                other => return Err(parse_err("b", format!("expected 0 or 1, found {other:?}"))),
            }
        }
        Ok(Self(flags))
    }
}

impl From<Vec<bool>> for NoiseFlags {
    fn from(v: Vec<bool>) -> Self {
        Self(v)
    }
}

/// `b_n = 1` iff `ℓ_n > t` (strictly).
pub fn flag_noisy(losses: &[f64], thr: &Threshold) -> NoiseFlags {
    NoiseFlags(losses.iter().map(|&l| l > thr.t).collect())
}
