//! The two stages end to end: pre-training and noise detection, then
//! training with the selective correction; evaluation and reporting.

use std::path::Path;
use std::time::Instant;

use ndarray::Axis;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::config::{DataSource, ExperimentConfig};
use crate::data::{self, Dataset};
use crate::error::{Error, Result, StageExt};
use crate::gmm::{self, Gmm2, NoiseFlags, Threshold};
use crate::nn::{ce_loss_per_sample, Model, Sgd, Target};
use crate::noise::{self, DetectionScore};
use crate::pretrain::{self, LossHistory, LossSummary, PretrainOptions};
use crate::rng::{self, tags};
use crate::transition::{self, TransitionMatrix};

/// How the transition matrix is updated during training; recorded in reports.
pub const TRANSITION_UPDATES: &str = "per_batch";

/// Train/test data with noise injected into the training part only.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    /// The matrix that generated the training noise.
    pub truth: TransitionMatrix,
}

/// Loads or generates the configured data, splits it and corrupts the
/// training labels.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    cfg.validate()?;
    let d = &cfg.data;
    let (train, test) = match d.source {
        DataSource::Blobs => {
            let pool = data::make_blobs(d.num_classes, d.per_class, d.dim, d.separation, cfg.seed)?;
            data::split(&pool, d.train_fraction, cfg.seed)?
        }
        DataSource::Mnist => data::load_mnist_dir(&d.mnist_dir)?,
        DataSource::Csv => {
            let path = d.csv_path.as_ref().expect("validated");
            let pool = data::load_csv(path, &d.label_column, d.num_classes)?;
            match &d.csv_test_path {
                Some(test_path) => (pool, data::load_csv(test_path, &d.label_column, d.num_classes)?),
                None => data::split(&pool, d.train_fraction, cfg.seed)?,
            }
        }
    };
    let train = match d.train_limit {
        Some(n) => train.head(n)?,
        None => train,
    };
    let test = match d.test_limit {
        Some(n) => test.head(n)?,
        None => test,
    };
    if train.dim() != test.dim() {
        return Err(Error::Consistency(format!(
            "train has {} features but test has {}",
            train.dim(),
            test.dim()
        )));
    }
    let truth = noise::ground_truth_matrix(cfg.noise, train.num_classes())?;
    let train = noise::inject_noise(&train, cfg.noise, cfg.seed)?;
    Ok(PreparedData { train, test, truth })
}

pub fn layer_sizes(cfg: &ExperimentConfig, ds: &Dataset) -> Vec<usize> {
    let mut sizes = vec![ds.dim()];
    sizes.extend(&cfg.model.hidden);
    sizes.push(ds.num_classes());
    sizes
}

/// The freshly initialized model both stage one and the plain baseline start from.
pub fn initial_model(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Model> {
    Model::init(&layer_sizes(cfg, ds), cfg.seed)
}

/// Fitted mixture and threshold in the exported record layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmRecord {
    pub lambda: f64,
    pub mu1: f64,
    pub sigma1_sq: f64,
    pub mu2: f64,
    pub sigma2_sq: f64,
    pub t: f64,
    pub balanced_accuracy: f64,
}

impl GmmRecord {
    pub fn new(g: &Gmm2, thr: &Threshold) -> Self {
        Self {
            lambda: g.lambda,
            mu1: g.mu1,
            sigma1_sq: g.sigma1_sq,
            mu2: g.mu2,
            sigma2_sq: g.sigma2_sq,
            t: thr.t,
            balanced_accuracy: thr.balanced_accuracy,
        }
    }

    pub fn gmm(&self) -> Gmm2 {
        Gmm2::new(self.lambda, self.mu1, self.sigma1_sq, self.mu2, self.sigma2_sq)
    }
}

/// Everything stage one reports about itself; the CLI stores it as `gmm.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// `None` when EM could not run (all losses identical).
    pub gmm: Option<GmmRecord>,
    pub burn_in: usize,
    pub em_iterations: usize,
    pub em_converged: bool,
    pub variance_floored: bool,
    /// No separable noise component: every sample was kept as clean.
    pub degenerate: bool,
    pub flagged_fraction: f64,
    /// Mean recorded loss per pre-training epoch.
    pub loss_curve: Vec<f64>,
    pub notices: Vec<String>,
}

impl StageRecord {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path.as_ref())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }
}

/// Outputs of pre-training, detection and transition initialization.
#[derive(Debug, Clone)]
pub struct StageOne {
    pub model: Model,
    pub history: LossHistory,
    pub summary: LossSummary,
    pub gmm: Option<Gmm2>,
    pub threshold: Option<Threshold>,
    pub flags: NoiseFlags,
    pub t_init: TransitionMatrix,
    pub record: StageRecord,
}

/// Mean loss below which the high-loss component is not treated as noise:
/// the model still gives the observed labels more than even odds on average.
pub const NOISY_LOSS_FLOOR: f64 = std::f64::consts::LN_2;

fn fitted_noise(g: &gmm::Gmm2) -> Result<()> {
    if g.mu2 < NOISY_LOSS_FLOOR {
        return Err(Error::Degenerate(format!(
            "high-loss component mean {:.4} is below ln 2, so the observed labels are fitted",
            g.mu2
        )));
    }
    Ok(())
}

/// Pre-trains under the cyclic schedule, fits the mixture to the aggregated
/// losses, flags samples above the threshold and initializes `T` from the
/// flagged samples.
///
/// A mixture without a separable noisy component yields all-clean flags and
/// a uniform `T`, with a notice instead of an error.
pub fn run_pretrain_stage(cfg: &ExperimentConfig, train: &Dataset) -> Result<StageOne> {
    cfg.validate()?;
    let p = &cfg.pretrain;
    let opts = PretrainOptions {
        epochs: p.epochs,
        batch_size: p.batch_size,
        momentum: p.momentum,
        seed: cfg.seed,
    };
    let model = initial_model(cfg, train).stage("pretrain")?;
    let (model, history) = pretrain::pretrain(model, train, &cfg.schedule(), &opts).stage("pretrain")?;
    let burn_in = cfg.burn_in();
    let summary = pretrain::aggregate_losses(&history, burn_in).stage("aggregate")?;
    let losses = summary.values();
    let n = train.len();
    let c = train.num_classes();
    let mut notices = Vec::new();

    let fit = match gmm::fit_em(losses, cfg.gmm.max_iter, cfg.gmm.tol) {
        Ok(fit) => Some(fit),
        Err(Error::Degenerate(msg)) => {
            notices.push(format!("mixture not fitted: {msg}; all samples kept as clean"));
            None
        }
        Err(e) => return Err(e.in_stage("gmm")),
    };
    let mut degenerate = fit.is_none();
    let threshold = match &fit {
        None => None,
        Some(f) => match gmm::optimal_threshold(&f.gmm, losses).and_then(|thr| fitted_noise(&f.gmm).map(|_| thr)) {
            Ok(thr) => Some(thr),
            Err(Error::Degenerate(msg)) => {
                degenerate = true;
                notices.push(format!("{msg}; all samples kept as clean"));
                // the largest loss flags nothing under the strict rule
                let t = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                Some(Threshold {
                    t,
                    balanced_accuracy: gmm::balanced_accuracy(&f.gmm, t),
                })
            }
            Err(e) => return Err(e.in_stage("threshold")),
        },
    };
    let flags = match &threshold {
        Some(thr) if !degenerate => gmm::flag_noisy(losses, thr),
        _ => NoiseFlags::all_clean(n),
    };

    let t_init = if cfg.ablation.no_init {
        TransitionMatrix::uniform(c).blend_uniform(cfg.train.blend)
    } else {
        let preds = model.predict(train.features().view()).stage("predict")?;
        match transition::init_from_predictions(&preds, train.observed_labels(), &flags, c, cfg.train.blend) {
            Ok(t) => t,
            Err(Error::EmptyEvidence) => {
                notices.push("no flagged samples; transition matrix starts uniform".into());
                TransitionMatrix::uniform(c)
            }
            Err(e) => return Err(e.in_stage("transition-init")),
        }
    };

    let record = StageRecord {
        gmm: fit.as_ref().zip(threshold.as_ref()).map(|(f, thr)| GmmRecord::new(&f.gmm, thr)),
        burn_in,
        em_iterations: fit.as_ref().map_or(0, |f| f.iterations),
        em_converged: fit.as_ref().is_some_and(|f| f.converged),
        variance_floored: fit.as_ref().is_some_and(|f| f.variance_floored),
        degenerate,
        flagged_fraction: flags.fraction(),
        loss_curve: history.epoch_means(),
        notices,
    };
    Ok(StageOne {
        model,
        history,
        summary,
        gmm: fit.map(|f| f.gmm),
        threshold,
        flags,
        t_init,
        record,
    })
}

/// Result of the second stage.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub t_final: TransitionMatrix,
    /// Mean training loss per epoch, taken on each batch before its update.
    pub loss_curve: Vec<f64>,
    /// Largest deviation of a row sum of `T` from 1 seen after any update.
    pub max_row_sum_error: f64,
    pub transition_updates: usize,
}

/// Trains over seeded shuffled mini-batches. Each batch computes the
/// selective loss, steps the transition scores at `lr_transition` and the
/// model at `lr`.
///
/// `no_selective` corrects every sample; `baseline_ce` trains on plain
/// cross-entropy and leaves `T` untouched.
pub fn train_detect_correct(
    cfg: &ExperimentConfig,
    mut model: Model,
    train: &Dataset,
    flags: &NoiseFlags,
    t0: &TransitionMatrix,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = train.len();
    if flags.len() != n {
        return Err(Error::arg(format!("{} flags for {n} training samples", flags.len())));
    }
    if t0.num_classes() != train.num_classes() {
        return Err(Error::arg("transition matrix size does not match the class count"));
    }
    let t = &cfg.train;
    let plain = cfg.ablation.baseline_ce;
    let flags = if cfg.ablation.no_selective {
        NoiseFlags::all_noisy(n)
    } else {
        flags.clone()
    };
    let b = flags.as_slice();
    let mut params = transition::params_from_matrix(t0).stage("train")?;
    let mut current = params.matrix();
    let mut max_err = current.max_row_sum_error();
    let mut updates = 0;
    let mut opt = Sgd::new(t.momentum)?;
    let ones = vec![1.0; t.batch_size];
    let features = train.features();
    let labels = train.observed_labels();
    let mut curve = Vec::with_capacity(t.epochs);
    let shuffle_seed = rng::derive_seed(cfg.seed, tags::TRAIN, 0);

    for epoch in 0..t.epochs {
        let mut total = 0.0;
        for idx in rng::epoch_permutation(n, shuffle_seed, epoch).chunks(t.batch_size) {
            let x = features.select(Axis(0), idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let w = &ones[..idx.len()];
            let trace = model.forward_trace(x.view()).stage("train")?;
            let grads = if plain {
                total += ce_loss_per_sample(trace.probs(), &y)?.iter().sum::<f64>();
                model.backward_trace(&trace, w, Target::Labels(&y))
            } else {
                let f: Vec<bool> = idx.iter().map(|&i| b[i]).collect();
                let probs = trace.probs();
                total += transition::selective_loss(probs, &y, &f, &current)?.iter().sum::<f64>();
                let g = transition::selective_prob_grad(probs, &y, &f, &current)?;
                let d_a = transition::transition_gradient(probs, &y, &f, &params, None)?;
                transition::update_transition(&mut params, &d_a, t.lr_transition)?;
                current = params.matrix();
                max_err = max_err.max(current.max_row_sum_error());
                updates += 1;
                model.backward_trace(&trace, w, Target::ProbGrad(&g))
            }
            .stage("train")?;
            opt.step(&mut model, &grads, t.lr)?;
        }
        curve.push(total / n as f64);
    }
    Ok(TrainOutcome {
        model,
        t_final: current,
        loss_curve: curve,
        max_row_sum_error: max_err,
        transition_updates: updates,
    })
}

/// Fraction of test samples whose prediction equals the clean label.
pub fn evaluate(model: &Model, test: &Dataset) -> Result<f64> {
    let clean = test
        .clean_labels()
        .ok_or_else(|| Error::State("evaluation needs clean labels".into()))?;
    if test.is_empty() {
        return Err(Error::arg("empty test set"));
    }
    let preds = model.predict(test.features().view())?;
    let hits = preds.iter().zip(clean).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / test.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

/// Welch's two-sample t-test from summary statistics, two-sided.
///
/// With both standard deviations zero the result is `p = 1` for equal means
/// and `p = 0` otherwise.
pub fn welch_t_test(
    mean_a: f64,
    sd_a: f64,
    n_a: usize,
    mean_b: f64,
    sd_b: f64,
    n_b: usize,
) -> Result<WelchTest> {
    if n_a < 2 || n_b < 2 {
        return Err(Error::arg("each sample needs n >= 2"));
    }
    if !(sd_a >= 0.0 && sd_b >= 0.0) {
        return Err(Error::arg("standard deviations must be non-negative"));
    }
    let va = sd_a * sd_a / n_a as f64;
    let vb = sd_b * sd_b / n_b as f64;
    let se2 = va + vb;
    let diff = mean_a - mean_b;
    if se2 == 0.0 {
        let df = (n_a + n_b - 2) as f64;
        return Ok(if diff == 0.0 {
            WelchTest { t: 0.0, df, p_value: 1.0 }
        } else {
            WelchTest {
                t: diff.signum() * f64::INFINITY,
                df,
                p_value: 0.0,
            }
        });
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (va * va / (n_a - 1) as f64 + vb * vb / (n_b - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::arg(e.to_string()))?;
    Ok(WelchTest {
        t,
        df,
        p_value: (2.0 * dist.sf(t.abs())).min(1.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub accuracy: f64,
    /// Test accuracy of the stage-one model, before correction.
    pub pretrain_accuracy: Option<f64>,
    pub detection: Option<DetectionScore>,
    pub gmm: Option<GmmRecord>,
    pub flagged_fraction: Option<f64>,
    pub t_init_error: Option<f64>,
    pub t_final_error: Option<f64>,
    pub t_init: Option<Vec<Vec<f64>>>,
    pub t_final: Option<Vec<Vec<f64>>>,
    pub max_row_sum_error: f64,
    pub transition_updates: String,
    pub pretrain_loss_curve: Vec<f64>,
    pub train_loss_curve: Vec<f64>,
    pub notices: Vec<String>,
    pub train_size: usize,
    pub test_size: usize,
    pub config: ExperimentConfig,
    pub seconds: f64,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path.as_ref())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }

    /// Copy with the wall-clock field zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        Self {
            seconds: 0.0,
            ..self.clone()
        }
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

fn rows(t: &TransitionMatrix) -> Vec<Vec<f64>> {
    t.as_array().rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Stage-one inputs to a report, in the form they are stored on disk.
#[derive(Debug, Clone, Copy)]
pub struct StageInputs<'a> {
    pub record: &'a StageRecord,
    pub flags: &'a NoiseFlags,
    pub t_init: &'a TransitionMatrix,
    pub pretrain_accuracy: Option<f64>,
}

/// Assembles a report from the stage outputs.
pub fn build_report(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    stage: Option<StageInputs<'_>>,
    outcome: &TrainOutcome,
    seconds: f64,
) -> Result<Report> {
    let accuracy = evaluate(&outcome.model, &data.test).stage("evaluate")?;
    let mask = data.train.flip_mask();
    let detection = match (stage, mask) {
        (Some(s), Some(m)) => Some(noise::score_detection(m, s.flags)?),
        _ => None,
    };
    let corrected = !cfg.ablation.baseline_ce;
    let t_init = stage.map(|s| s.t_init);
    Ok(Report {
        accuracy,
        pretrain_accuracy: stage.and_then(|s| s.pretrain_accuracy),
        detection,
        gmm: stage.and_then(|s| s.record.gmm),
        flagged_fraction: stage.map(|s| s.flags.fraction()),
        t_init_error: t_init.map(|t| transition::matrix_error(t, &data.truth)).transpose()?,
        t_final_error: if corrected {
            Some(transition::matrix_error(&outcome.t_final, &data.truth)?)
        } else {
            None
        },
        t_init: t_init.map(rows),
        t_final: corrected.then(|| rows(&outcome.t_final)),
        max_row_sum_error: outcome.max_row_sum_error,
        transition_updates: TRANSITION_UPDATES.into(),
        pretrain_loss_curve: stage.map(|s| s.record.loss_curve.clone()).unwrap_or_default(),
        train_loss_curve: outcome.loss_curve.clone(),
        notices: stage.map(|s| s.record.notices.clone()).unwrap_or_default(),
        train_size: data.train.len(),
        test_size: data.test.len(),
        config: cfg.clone(),
        seconds,
    })
}

/// Artifacts of a complete run.
#[derive(Debug, Clone)]
pub struct Run {
    pub report: Report,
    pub stage_one: Option<StageOne>,
    pub outcome: TrainOutcome,
}

/// Both stages with evaluation. Under `baseline_ce` stage one is skipped and
/// a fresh model is trained on plain cross-entropy.
pub fn execute(cfg: &ExperimentConfig) -> Result<Run> {
    let start = Instant::now();
    cfg.validate()?;
    let data = prepare_data(cfg).stage("data")?;
    execute_on(cfg, &data, start)
}

/// [`execute`] on already prepared data; `start` anchors the wall clock.
pub fn execute_on(cfg: &ExperimentConfig, data: &PreparedData, start: Instant) -> Result<Run> {
    let n = data.train.len();
    let c = data.train.num_classes();
    let (stage_one, model, flags, t0) = if cfg.ablation.baseline_ce {
        let model = initial_model(cfg, &data.train)?;
        (None, model, NoiseFlags::all_clean(n), TransitionMatrix::uniform(c))
    } else {
        let s = run_pretrain_stage(cfg, &data.train)?;
        let (m, f, t) = (s.model.clone(), s.flags.clone(), s.t_init.clone());
        (Some(s), m, f, t)
    };
    let pretrain_accuracy = match &stage_one {
        Some(s) => Some(evaluate(&s.model, &data.test).stage("evaluate")?),
        None => None,
    };
    let outcome = train_detect_correct(cfg, model, &data.train, &flags, &t0)?;
    let stage = stage_one.as_ref().map(|s| StageInputs {
        record: &s.record,
        flags: &s.flags,
        t_init: &s.t_init,
        pretrain_accuracy,
    });
    let report = build_report(cfg, data, stage, &outcome, start.elapsed().as_secs_f64())?;
    Ok(Run {
        report,
        stage_one,
        outcome,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    execute(cfg).map(|r| r.report)
}
