//! Fully-connected softmax classifier with exact backpropagation and SGD
//! with momentum. All arithmetic is `f64`.
//!
//! Weights of layer `i` are stored `out x in`, so a batch `X` (rows are
//! samples) maps to `X · Wᵀ + b`. Hidden layers use ReLU; the output layer
//! feeds a softmax.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, tags};

/// Floor applied to probabilities inside every `log`.
pub const PROB_FLOOR: f64 = 1e-12;

const CHECKPOINT_MAGIC: &[u8; 8] = b"DCNMLP01";

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layer_sizes: Vec<usize>,
    pub(crate) weights: Vec<Array2<f64>>,
    pub(crate) biases: Vec<Array1<f64>>,
}

/// Parameter-shaped container for gradients (and optimizer velocity).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            weights: model.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: model.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    fn matches(&self, model: &Model) -> bool {
        self.weights.len() == model.weights.len()
            && self.weights.iter().zip(&model.weights).all(|(g, w)| g.dim() == w.dim())
            && self.biases.iter().zip(&model.biases).all(|(g, b)| g.dim() == b.dim())
    }

    pub fn max_abs(&self) -> f64 {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// What the output layer is trained against.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    /// Hard labels: per-sample loss `-ln p[label]`.
    Labels(&'a [usize]),
    /// Per-sample gradient of the loss with respect to the softmax output
    /// (`B x C`), for objectives built on top of the probabilities.
    ProbGrad(&'a Array2<f64>),
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `inputs[i]` is the input to layer `i` (post-activation of layer `i-1`).
    inputs: Vec<Array2<f64>>,
    probs: Array2<f64>,
}

impl Trace {
    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }
}

impl Model {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, zero biases.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::arg(format!(
                "need at least two layer sizes, all positive; got {layer_sizes:?}"
            )));
        }
        let mut rng = rng::stream(seed, tags::INIT, 0);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..bound));
            weights.push(w);
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    /// Builds a model from explicit parameters (`weights[i]` is `out x in`).
    pub fn from_parameters(weights: Vec<Array2<f64>>, biases: Vec<Array1<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::arg("need one bias vector per weight matrix"));
        }
        let mut sizes = vec![weights[0].ncols()];
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.ncols() != *sizes.last().unwrap() || b.len() != w.nrows() {
                return Err(Error::arg(format!("layer {i} has incompatible shape")));
            }
            sizes.push(w.nrows());
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::arg("layer sizes must be positive"));
        }
        Ok(Self {
            layer_sizes: sizes,
            weights,
            biases,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self, layer: usize) -> &Array2<f64> {
        &self.weights[layer]
    }

    pub fn biases(&self, layer: usize) -> &Array1<f64> {
        &self.biases[layer]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut Array2<f64> {
        &mut self.weights[layer]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut Array1<f64> {
        &mut self.biases[layer]
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn check_batch(&self, batch: &ArrayView2<f64>) -> Result<()> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::arg(format!(
                "batch has {} columns but the model expects {}",
                batch.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Forward pass keeping the activations needed by [`Model::backward_trace`].
    pub fn forward_trace(&self, batch: ArrayView2<f64>) -> Result<Trace> {
        self.check_batch(&batch)?;
        let last = self.weights.len() - 1;
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut a = batch.to_owned();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = a.dot(&w.t());
            z += b;
            inputs.push(a);
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            a = z;
        }
        softmax_rows_inplace(&mut a);
        Ok(Trace { inputs, probs: a })
    }

    /// Class probabilities, one row per sample.
    pub fn forward(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_trace(batch)?.probs)
    }

    /// Forward in chunks of `chunk` rows; same result as one big pass.
    pub fn forward_chunked(&self, data: ArrayView2<f64>, chunk: usize) -> Result<Array2<f64>> {
        self.check_batch(&data)?;
        let mut out = Array2::zeros((data.nrows(), self.num_classes()));
        for (start, rows) in data.axis_chunks_iter(Axis(0), chunk.max(1)).enumerate().map(|(i, r)| (i * chunk.max(1), r)) {
            let p = self.forward(rows)?;
            out.slice_mut(ndarray::s![start..start + p.nrows(), ..]).assign(&p);
        }
        Ok(out)
    }

    /// Argmax of the forward rows; ties go to the smallest class index.
    pub fn predict(&self, batch: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward_chunked(batch, 1024)?))
    }

    /// Gradient of the mean weighted loss `(1/B) Σ_b w_b L_b`.
    pub fn backward(
        &self,
        batch: ArrayView2<f64>,
        sample_weights: &[f64],
        target: Target<'_>,
    ) -> Result<Gradients> {
        let trace = self.forward_trace(batch)?;
        self.backward_trace(&trace, sample_weights, target)
    }

    /// Backward pass over a trace produced by [`Model::forward_trace`].
    pub fn backward_trace(
        &self,
        trace: &Trace,
        sample_weights: &[f64],
        target: Target<'_>,
    ) -> Result<Gradients> {
        let probs = &trace.probs;
        let (bsz, c) = probs.dim();
        if sample_weights.len() != bsz {
            return Err(Error::arg(format!(
                "{} sample weights for a batch of {bsz}",
                sample_weights.len()
            )));
        }
        if sample_weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::arg("sample weights must be non-negative"));
        }

        // dL/dlogits, scaled by w_b / B
        let mut delta = probs.clone();
        match target {
            Target::Labels(labels) => {
                if labels.len() != bsz {
                    return Err(Error::arg(format!("{} labels for a batch of {bsz}", labels.len())));
                }
                for (b, &y) in labels.iter().enumerate() {
                    if y >= c {
                        return Err(Error::arg(format!("label {y} out of range for {c} classes")));
                    }
                    delta[[b, y]] -= 1.0;
                }
            }
            Target::ProbGrad(g) => {
                if g.dim() != (bsz, c) {
                    return Err(Error::arg(format!(
                        "probability gradient has shape {:?}, expected {:?}",
                        g.dim(),
                        (bsz, c)
                    )));
                }
                for ((mut d, p), g) in delta.rows_mut().into_iter().zip(probs.rows()).zip(g.rows()) {
                    let inner = p.dot(&g);
                    Zip::from(&mut d).and(&p).and(&g).for_each(|d, &p, &g| *d = p * (g - inner));
                }
            }
        }
        let scale = 1.0 / bsz as f64;
        for (mut row, &w) in delta.rows_mut().into_iter().zip(sample_weights) {
            row *= w * scale;
        }

        let n_layers = self.weights.len();
        let mut grads = Gradients {
            weights: Vec::with_capacity(n_layers),
            biases: Vec::with_capacity(n_layers),
        };
        for i in (0..n_layers).rev() {
            let input = &trace.inputs[i];
            grads.weights.push(delta.t().dot(input));
            grads.biases.push(delta.sum_axis(Axis(0)));
            if i > 0 {
                let mut prev = delta.dot(&self.weights[i]);
                // inputs[i] = relu(z_{i-1}) > 0 exactly where relu is active
                Zip::from(&mut prev).and(input).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = prev;
            }
        }
        grads.weights.reverse();
        grads.biases.reverse();
        Ok(grads)
    }

    /// Writes the binary checkpoint described in the README.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&(self.layer_sizes.len() as u32).to_le_bytes()).map_err(io)?;
        for &s in &self.layer_sizes {
            w.write_all(&(s as u32).to_le_bytes()).map_err(io)?;
        }
        for (wt, b) in self.weights.iter().zip(&self.biases) {
            for v in wt.iter().chain(b.iter()) {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                path: path.into(),
                expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
                actual: String::from_utf8_lossy(&magic).into_owned(),
            });
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(io)?;
        let n = u32::from_le_bytes(u32buf) as usize;
        let mut sizes = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut u32buf).map_err(io)?;
            sizes.push(u32::from_le_bytes(u32buf) as usize);
        }
        if sizes.len() < 2 {
            return Err(Error::Consistency(format!("checkpoint lists {} layer sizes", sizes.len())));
        }
        let mut f64buf = [0u8; 8];
        let mut next = |r: &mut BufReader<File>| -> Result<f64> {
            r.read_exact(&mut f64buf).map_err(io)?;
            Ok(f64::from_le_bytes(f64buf))
        };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let mut w = Vec::with_capacity(fan_in * fan_out);
            for _ in 0..fan_in * fan_out {
                w.push(next(&mut r)?);
            }
            let mut b = Vec::with_capacity(fan_out);
            for _ in 0..fan_out {
                b.push(next(&mut r)?);
            }
            weights.push(Array2::from_shape_vec((fan_out, fan_in), w).map_err(|e| Error::Consistency(e.to_string()))?);
            biases.push(Array1::from(b));
        }
        Self::from_parameters(weights, biases)
    }
}

/// Numerically stable in-place row softmax.
pub fn softmax_rows_inplace(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

pub fn argmax_rows(probs: &Array2<f64>) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Per-sample cross-entropy `-ln max(p[label], 1e-12)`.
pub fn ce_loss_per_sample(probs: &Array2<f64>, labels: &[usize]) -> Result<Vec<f64>> {
    if labels.len() != probs.nrows() {
        return Err(Error::arg(format!(
            "{} labels for {} probability rows",
            labels.len(),
            probs.nrows()
        )));
    }
    let c = probs.ncols();
    labels
        .iter()
        .enumerate()
        .map(|(b, &y)| {
            if y >= c {
                Err(Error::arg(format!("label {y} out of range for {c} classes")))
            } else {
                Ok(-probs[[b, y]].max(PROB_FLOOR).ln())
            }
        })
        .collect()
}

/// SGD with heavy-ball momentum: `v <- m v + g`, `θ <- θ - lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    velocity: Option<Gradients>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::arg(format!("momentum {momentum} not in [0, 1)")));
        }
        Ok(Self {
            momentum,
            velocity: None,
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients, learning_rate: f64) -> Result<()> {
        if !grads.matches(model) {
            return Err(Error::arg("gradient shapes do not match the model"));
        }
        if !(learning_rate >= 0.0) {
            return Err(Error::arg(format!("learning rate {learning_rate} must be non-negative")));
        }
        let m = self.momentum;
        let v = self.velocity.get_or_insert_with(|| Gradients::zeros_like(model));
        for ((w, vw), gw) in model.weights.iter_mut().zip(&mut v.weights).zip(&grads.weights) {
            Zip::from(w).and(vw).and(gw).for_each(|w, v, &g| {
                *v = m * *v + g;
                *w -= learning_rate * *v;
            });
        }
        for ((b, vb), gb) in model.biases.iter_mut().zip(&mut v.biases).zip(&grads.biases) {
            Zip::from(b).and(vb).and(gb).for_each(|b, v, &g| {
                *v = m * *v + g;
                *b -= learning_rate * *v;
            });
        }
        Ok(())
    }
}
