//! The noise transition matrix `T` (`T[l][k]` = probability that true class
//! `l` is observed as `k`), its estimation from flagged samples, its
//! row-softmax parametrization and the selective forward-corrected loss.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::gmm::NoiseFlags;
use crate::nn::{softmax_rows_inplace, PROB_FLOOR};

const ROW_SUM_TOL: f64 = 1e-9;

/// Row-stochastic `C x C` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix(Array2<f64>);

impl TransitionMatrix {
    pub fn new(t: Array2<f64>) -> Result<Self> {
        let (r, c) = t.dim();
        if r != c || r == 0 {
            return Err(Error::arg(format!("transition matrix must be square and non-empty, got {r}x{c}")));
        }
        if let Some(v) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::arg(format!("transition entry {v} outside [0, 1]")));
        }
        for (l, row) in t.rows().into_iter().enumerate() {
            let s = row.sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::arg(format!("row {l} sums to {s}, not 1")));
            }
        }
        Ok(Self(t))
    }

    pub fn identity(num_classes: usize) -> Self {
        Self(Array2::eye(num_classes))
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self(Array2::from_elem((num_classes, num_classes), 1.0 / num_classes as f64))
    }

    /// `(1 - gamma) T + gamma U` with `U` the uniform matrix.
    pub fn blend_uniform(&self, gamma: f64) -> Self {
        let u = 1.0 / self.num_classes() as f64;
        Self(self.0.mapv(|v| (1.0 - gamma) * v + gamma * u))
    }

    pub fn num_classes(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, l: usize, k: usize) -> f64 {
        self.0[[l, k]]
    }

    pub fn row(&self, l: usize) -> &[f64] {
        let start = l * self.num_classes();
        &self.0.as_slice().expect("standard layout")[start..start + self.num_classes()]
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn max_row_sum_error(&self) -> f64 {
        self.0
            .sum_axis(Axis(1))
            .iter()
            .fold(0.0f64, |m, s| m.max((s - 1.0).abs()))
    }

    /// Writes `C` lines of `C` comma-separated entries, no header.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for row in self.0.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let row = line
                .split(',')
                .enumerate()
                .map(|(j, cell)| {
                    cell.trim().parse::<f64>().map_err(|_| Error::Parse {
                        row: i + 1,
                        column: j.to_string(),
                        message: format!("{cell:?} is not a number"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Consistency(format!("{} is not a square matrix", path.display())));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Self::new(Array2::from_shape_vec((c, c), flat).map_err(|e| Error::Consistency(e.to_string()))?)
    }
}

/// Counts `(prediction l, observed k)` pairs over flagged samples, normalizes
/// rows (zero rows become uniform) and blends with the uniform matrix by
/// `blend` so every entry is strictly positive.
pub fn init_from_predictions(
    predictions: &[usize],
    observed: &[usize],
    flags: &NoiseFlags,
    num_classes: usize,
    blend: f64,
) -> Result<TransitionMatrix> {
    let b = flags.as_slice();
    if predictions.len() != observed.len() || observed.len() != b.len() {
        return Err(Error::arg(format!(
            "length mismatch: {} predictions, {} labels, {} flags",
            predictions.len(),
            observed.len(),
            b.len()
        )));
    }
    if !(0.0..1.0).contains(&blend) {
        return Err(Error::arg(format!("blend {blend} not in [0, 1)")));
    }
    let c = num_classes;
    let mut counts = Array2::<f64>::zeros((c, c));
    let mut any = false;
    for ((&l, &k), &flagged) in predictions.iter().zip(observed).zip(b) {
        if l >= c || k >= c {
            return Err(Error::arg(format!("class index out of range for {c} classes")));
        }
        if flagged {
            counts[[l, k]] += 1.0;
            any = true;
        }
    }
    if !any {
        return Err(Error::EmptyEvidence);
    }
    for mut row in counts.rows_mut() {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        } else {
            row.fill(1.0 / c as f64);
        }
    }
    Ok(TransitionMatrix(counts).blend_uniform(blend))
}

/// Mean over rows of the L1 distance, halved; lies in `[0, 1]`.
pub fn matrix_error(estimate: &TransitionMatrix, truth: &TransitionMatrix) -> Result<f64> {
    if estimate.num_classes() != truth.num_classes() {
        return Err(Error::arg(format!(
            "comparing {}x{} with {}x{}",
            estimate.num_classes(),
            estimate.num_classes(),
            truth.num_classes(),
            truth.num_classes()
        )));
    }
    let l1: f64 = (&estimate.0 - &truth.0).mapv(f64::abs).sum();
    Ok(l1 / (2.0 * estimate.num_classes() as f64))
}

/// Unconstrained scores `A`; the realized matrix is the row-wise softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionParams {
    scores: Array2<f64>,
}

impl TransitionParams {
    pub fn from_scores(scores: Array2<f64>) -> Result<Self> {
        if scores.nrows() != scores.ncols() || scores.nrows() == 0 {
            return Err(Error::arg("score matrix must be square and non-empty"));
        }
        Ok(Self { scores })
    }

    pub fn scores(&self) -> &Array2<f64> {
        &self.scores
    }

    pub fn num_classes(&self) -> usize {
        self.scores.nrows()
    }

    pub fn matrix(&self) -> TransitionMatrix {
        let mut t = self.scores.clone();
        softmax_rows_inplace(&mut t);
        TransitionMatrix(t)
    }
}

/// `A = ln T`; requires strictly positive entries.
pub fn params_from_matrix(t: &TransitionMatrix) -> Result<TransitionParams> {
    if let Some(v) = t.0.iter().find(|&&v| v <= 0.0) {
        return Err(Error::arg(format!(
            "entry {v} is not strictly positive; blend with the uniform matrix first"
        )));
    }
    TransitionParams::from_scores(t.0.mapv(f64::ln))
}

/// `q_k = Σ_l T[l][k] p_l`.
pub fn corrected_distribution(t: &TransitionMatrix, p: ArrayView1<f64>) -> Array1<f64> {
    t.0.t().dot(&p)
}

fn check_batch(probs: &Array2<f64>, observed: &[usize], flags: &[bool], c: usize) -> Result<()> {
    let bsz = probs.nrows();
    if observed.len() != bsz || flags.len() != bsz {
        return Err(Error::arg(format!(
            "{bsz} probability rows, {} labels, {} flags",
            observed.len(),
            flags.len()
        )));
    }
    if probs.ncols() != c {
        return Err(Error::arg(format!("{} probability columns for {c} classes", probs.ncols())));
    }
    if let Some(&y) = observed.iter().find(|&&y| y >= c) {
        return Err(Error::arg(format!("label {y} out of range for {c} classes")));
    }
    Ok(())
}

/// Corrected probability of the observed label, `Σ_l T[l][y] p_l`.
fn corrected_at(t: &Array2<f64>, p: ArrayView1<f64>, y: usize) -> f64 {
    t.column(y).dot(&p)
}

/// Plain cross-entropy where `b = 0`, forward-corrected
/// `-ln Σ_l T[l][ỹ] p_l` where `b = 1`.
pub fn selective_loss(
    probs: &Array2<f64>,
    observed: &[usize],
    flags: &[bool],
    t: &TransitionMatrix,
) -> Result<Vec<f64>> {
    check_batch(probs, observed, flags, t.num_classes())?;
    Ok(probs
        .rows()
        .into_iter()
        .zip(observed)
        .zip(flags)
        .map(|((p, &y), &noisy)| {
            let v = if noisy { corrected_at(&t.0, p, y) } else { p[y] };
            -v.max(PROB_FLOOR).ln()
        })
        .collect())
}

/// Per-sample gradient of the selective loss with respect to the softmax
/// output, for `Target::ProbGrad`.
pub fn selective_prob_grad(
    probs: &Array2<f64>,
    observed: &[usize],
    flags: &[bool],
    t: &TransitionMatrix,
) -> Result<Array2<f64>> {
    check_batch(probs, observed, flags, t.num_classes())?;
    let mut g = Array2::zeros(probs.raw_dim());
    for (b, ((p, &y), &noisy)) in probs.rows().into_iter().zip(observed).zip(flags).enumerate() {
        if noisy {
            let q = corrected_at(&t.0, p, y);
            if q > PROB_FLOOR {
                for l in 0..t.num_classes() {
                    g[[b, l]] = -t.0[[l, y]] / q;
                }
            }
        } else if p[y] > PROB_FLOOR {
            g[[b, y]] = -1.0 / p[y];
        }
    }
    Ok(g)
}

/// Gradient of `(1/B) Σ_b w_b L_b` with respect to the scores `A`.
/// Clean samples do not touch `T` and contribute nothing.
pub fn transition_gradient(
    probs: &Array2<f64>,
    observed: &[usize],
    flags: &[bool],
    params: &TransitionParams,
    sample_weights: Option<&[f64]>,
) -> Result<Array2<f64>> {
    let c = params.num_classes();
    check_batch(probs, observed, flags, c)?;
    let bsz = probs.nrows();
    if let Some(w) = sample_weights {
        if w.len() != bsz {
            return Err(Error::arg(format!("{} weights for a batch of {bsz}", w.len())));
        }
    }
    let t = params.matrix().0;
    // dL/dT[l][y] = -p_l / q accumulated per observed column y
    let mut d_t = Array2::<f64>::zeros((c, c));
    for (b, ((p, &y), &noisy)) in probs.rows().into_iter().zip(observed).zip(flags).enumerate() {
        if !noisy {
            continue;
        }
        let q = corrected_at(&t, p, y);
        if q <= PROB_FLOOR {
            continue;
        }
        let w = sample_weights.map_or(1.0, |w| w[b]);
        for l in 0..c {
            d_t[[l, y]] -= w * p[l] / q;
        }
    }
    d_t /= bsz as f64;
    // through the row softmax: dA[l][j] = T[l][j] (dT[l][j] - Σ_k T[l][k] dT[l][k])
    let mut d_a = Array2::zeros((c, c));
    for l in 0..c {
        let inner = t.row(l).dot(&d_t.row(l));
        for j in 0..c {
            d_a[[l, j]] = t[[l, j]] * (d_t[[l, j]] - inner);
        }
    }
    Ok(d_a)
}

/// `A <- A - lr * grad`.
pub fn update_transition(params: &mut TransitionParams, grads: &Array2<f64>, lr: f64) -> Result<()> {
    if grads.dim() != params.scores.dim() {
        return Err(Error::arg("gradient shape does not match the score matrix"));
    }
    params.scores.scaled_add(-lr, grads);
    Ok(())
}
