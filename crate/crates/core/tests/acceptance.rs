//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! MNIST criteria read the IDX files from `data/mnist` at the workspace
//! root, or from `$MNIST_DIR`. `ACCEPTANCE_ONLY=2,5` runs a subset.

use std::path::PathBuf;
use std::time::Instant;

use dcnet::config::ExperimentConfig;
use dcnet::gmm::{self, fit_em, optimal_threshold, sensitivity, specificity, Gmm2, NoiseFlags};
use dcnet::nn::{ce_loss_per_sample, Model, Target};
use dcnet::noise::{ground_truth_matrix, score_detection, NoiseSpec};
use dcnet::pipeline::{self, execute, prepare_data, run_pretrain_stage, welch_t_test};
use dcnet::transition::{
    init_from_predictions, matrix_error, selective_loss, selective_prob_grad, transition_gradient, TransitionMatrix,
    TransitionParams,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Check = Result<(bool, String), dcnet::Error>;

fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist")))
}

fn mnist_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_overrides(&[
        "data.source=mnist",
        "noise.kind=symmetric",
        "noise.rate=0.5",
        "model.hidden=256,128",
        "pretrain.epochs=50",
        "pretrain.batch_size=256",
        "train.epochs=40",
        "train.batch_size=256",
    ])
    .unwrap();
    cfg.data.mnist_dir = mnist_dir();
    cfg.seed = seed;
    cfg
}

fn blob_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_overrides(&[
        "data.source=blobs",
        "data.num_classes=4",
        "data.per_class=50",
        "data.dim=10",
        "data.separation=5",
        "data.train_fraction=0.5",
        "noise.kind=symmetric",
        "noise.rate=0.4",
        "model.hidden=64,64",
        "pretrain.epochs=30",
        "pretrain.batch_size=32",
        "train.epochs=20",
        "train.batch_size=32",
    ])
    .unwrap();
    cfg.seed = seed;
    cfg
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn c1_mnist_reproduction() -> Check {
    let mut full = Vec::new();
    let mut base = Vec::new();
    let mut lines = Vec::new();
    for seed in 0..3 {
        let cfg = mnist_config(seed);
        let a = pipeline::run_experiment(&cfg)?;
        let mut b_cfg = cfg.clone();
        b_cfg.ablation.baseline_ce = true;
        let b = pipeline::run_experiment(&b_cfg)?;
        lines.push(format!("seed {seed}: {:.4} vs {:.4}", a.accuracy, b.accuracy));
        full.push(a.accuracy);
        base.push(b.accuracy);
    }
    let (f, b) = (mean(&full), mean(&base));
    let pass = f >= 0.955 && f - b >= 0.015;
    Ok((
        pass,
        format!(
            "mean accuracy {:.2}% (need >= 95.5), baseline {:.2}%, gap {:.2} pts (need >= 1.5); {}",
            100.0 * f,
            100.0 * b,
            100.0 * (f - b),
            lines.join("; ")
        ),
    ))
}

fn c2_detection_quality() -> Check {
    let mut cfg = mnist_config(0);
    cfg.data.train_limit = Some(10_000);
    let data = prepare_data(&cfg)?;
    let stage = run_pretrain_stage(&cfg, &data.train)?;
    let score = score_detection(data.train.flip_mask().unwrap(), &stage.flags)?;
    let frac = stage.flags.fraction();
    let pass = score.balanced_accuracy >= 0.85 && (frac - 0.5).abs() <= 0.10;
    Ok((
        pass,
        format!(
            "balanced accuracy {:.4} (need >= 0.85), flagged fraction {frac:.4} (need 0.40..0.60)",
            score.balanced_accuracy
        ),
    ))
}

fn c3_em_correctness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = Normal::new(0.5, 0.2).unwrap();
    let b = Normal::new(3.0, 0.5).unwrap();
    let xs: Vec<f64> = (0..10_000)
        .map(|_| {
            if rng.random::<f64>() < 0.7 {
                a.sample(&mut rng)
            } else {
                b.sample(&mut rng)
            }
        })
        .collect();
    let fit = fit_em(&xs, 1000, 1e-10)?;
    let g = fit.gmm;
    let monotone = fit.log_likelihood.windows(2).all(|w| w[1] >= w[0] - 1e-9);
    let (d1, d2, dl) = ((g.mu1 - 0.5).abs(), (g.mu2 - 3.0).abs(), (g.lambda - 0.7).abs());
    Ok((
        d1 < 0.05 && d2 < 0.05 && dl < 0.03 && monotone,
        format!(
            "|dmu1| {d1:.4}, |dmu2| {d2:.4} (< 0.05), |dlambda| {dl:.4} (< 0.03), log-likelihood monotone over {} iterations: {monotone}",
            fit.iterations
        ),
    ))
}

fn brute_force_threshold(g: &Gmm2, lo: f64, hi: f64, points: usize) -> f64 {
    let mut best = (f64::NEG_INFINITY, lo);
    for i in 0..points {
        let t = lo + (hi - lo) * i as f64 / (points - 1) as f64;
        let ba = 0.5 * (sensitivity(g, t) + specificity(g, t));
        if ba > best.0 {
            best = (ba, t);
        }
    }
    best.1
}

fn c4_threshold_correctness() -> Check {
    let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let (lo, hi) = (0.0, 8.0);
    let step = (hi - lo) / (gmm::THRESHOLD_GRID - 1) as f64;

    let sym = Gmm2::new(0.5, 1.0, 0.3, 3.0, 0.3);
    let t_sym = optimal_threshold(&sym, &[lo, hi])?.t;
    let mid_ok = (t_sym - 2.0).abs() <= step;

    let mut worst_grid: f64 = 0.0;
    let mut stationary = true;
    for (m1, v1, m2, v2) in [(0.0, 1.0, 4.0, 4.0), (0.3, 0.05, 2.0, 0.6), (1.0, 0.5, 1.8, 0.1)] {
        let g = Gmm2::new(0.5, m1, v1, m2, v2);
        let t = optimal_threshold(&g, &[lo, hi])?.t;
        worst_grid = worst_grid.max((t - brute_force_threshold(&g, lo, hi, 1_000_000)).abs());
        let (s1, s2) = (v1.sqrt(), v2.sqrt());
        let gap = |t: f64| phi((t - m1) / s1) / s1 - phi((t - m2) / s2) / s2;
        stationary &= gap(t - step) * gap(t + step) <= 0.0;
    }
    Ok((
        mid_ok && worst_grid < 1e-3 && stationary,
        format!(
            "symmetric t {t_sym:.5} vs 2.0 (step {step:.5}); worst |t - fine grid| {worst_grid:.2e} (< 1e-3); stationarity sign change within one step: {stationary}"
        ),
    ))
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    diff / numeric.iter().map(|n| n.abs()).fold(1e-12, f64::max)
}

/// Central differences of `loss` over every model parameter, against `analytic`.
fn model_fd_error(model: &mut Model, loss: &dyn Fn(&Model) -> f64, analytic: &dcnet::nn::Gradients) -> f64 {
    let h = 1e-5;
    let (mut a, mut n) = (Vec::new(), Vec::new());
    for layer in 0..model.num_layers() {
        let (rows, cols) = model.weights(layer).dim();
        for i in 0..rows {
            for j in 0..cols {
                let orig = model.weights(layer)[[i, j]];
                model.weights_mut(layer)[[i, j]] = orig + h;
                let up = loss(model);
                model.weights_mut(layer)[[i, j]] = orig - h;
                let down = loss(model);
                model.weights_mut(layer)[[i, j]] = orig;
                n.push((up - down) / (2.0 * h));
                a.push(analytic.weights[layer][[i, j]]);
            }
            let orig = model.biases(layer)[i];
            model.biases_mut(layer)[i] = orig + h;
            let up = loss(model);
            model.biases_mut(layer)[i] = orig - h;
            let down = loss(model);
            model.biases_mut(layer)[i] = orig;
            n.push((up - down) / (2.0 * h));
            a.push(analytic.biases[layer][i]);
        }
    }
    relative_error(&a, &n)
}

fn random_probs(rng: &mut ChaCha8Rng, b: usize, c: usize) -> Array2<f64> {
    let mut p = Array2::from_shape_fn((b, c), |_| rng.random::<f64>() + 0.05);
    for mut row in p.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    p
}

fn c5_transition_machinery() -> Check {
    // (a) counting estimate from simulated flagged samples
    let c = 10;
    let truth = ground_truth_matrix(NoiseSpec::pair(0.2), c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (mut preds, mut observed) = (Vec::new(), Vec::new());
    for _ in 0..1000 {
        let y = rng.random_range(0..c);
        let k = if rng.random::<f64>() < 0.8 { y } else { (y + 1) % c };
        preds.push(y);
        observed.push(k);
    }
    let est = init_from_predictions(&preds, &observed, &NoiseFlags::all_noisy(1000), c, 0.0)?;
    let err_a = matrix_error(&est, &truth)?;

    // (b) row sums after every update of a full training run
    let run = execute(&blob_config(0))?;
    let err_b = run.outcome.max_row_sum_error;

    // (c) identity correction is plain cross-entropy
    let probs = random_probs(&mut rng, 50, 5);
    let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
    let flags: Vec<bool> = (0..50).map(|i| i % 3 == 0).collect();
    let ce = ce_loss_per_sample(&probs, &labels)?;
    let id = selective_loss(&probs, &labels, &flags, &TransitionMatrix::identity(5))?;
    let err_c = ce.iter().zip(&id).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    // (d) finite differences: CE and selective loss through the model, and the T scores
    let x = Array2::from_shape_fn((8, 5), |_| rng.random::<f64>() * 2.0 - 1.0);
    let y = vec![0, 1, 2, 0, 1, 2, 0, 1];
    let mut model = Model::init(&[5, 4, 3], 3)?;
    let g = model.backward(x.view(), &[1.0; 8], Target::Labels(&y))?;
    let ce_loss = |m: &Model| mean(&ce_loss_per_sample(&m.forward(x.view()).unwrap(), &y).unwrap());
    let fd_ce = model_fd_error(&mut model, &ce_loss, &g);

    let t = TransitionMatrix::new(random_probs(&mut rng, 3, 3))?;
    let b: Vec<bool> = (0..8).map(|i| i % 2 == 0).collect();
    let p = model.forward(x.view())?;
    let dp = selective_prob_grad(&p, &y, &b, &t)?;
    let g = model.backward(x.view(), &[1.0; 8], Target::ProbGrad(&dp))?;
    let sel_loss = |m: &Model| mean(&selective_loss(&m.forward(x.view()).unwrap(), &y, &b, &t).unwrap());
    let fd_sel = model_fd_error(&mut model, &sel_loss, &g);

    let probs = random_probs(&mut rng, 6, 3);
    let obs = vec![0, 1, 2, 2, 1, 0];
    let fl = [true, false, true, true, false, true];
    let scores = Array2::from_shape_fn((3, 3), |_| rng.random::<f64>() * 2.0 - 1.0);
    let params = TransitionParams::from_scores(scores.clone())?;
    let analytic = transition_gradient(&probs, &obs, &fl, &params, None)?;
    let loss = |a: &Array2<f64>| {
        let t = TransitionParams::from_scores(a.clone()).unwrap().matrix();
        mean(&selective_loss(&probs, &obs, &fl, &t).unwrap())
    };
    let mut numeric = Array2::zeros((3, 3));
    for i in 0..3 {
        for j in 0..3 {
            let (mut up, mut down) = (scores.clone(), scores.clone());
            up[[i, j]] += 1e-5;
            down[[i, j]] -= 1e-5;
            numeric[[i, j]] = (loss(&up) - loss(&down)) / 2e-5;
        }
    }
    let fd_t = relative_error(analytic.as_slice().unwrap(), numeric.as_slice().unwrap());

    let fd = fd_ce.max(fd_sel).max(fd_t);
    Ok((
        err_a <= 0.05 && err_b <= 1e-9 && err_c <= 1e-12 && fd < 1e-4,
        format!(
            "(a) init error {err_a:.4} (<= 0.05); (b) max row-sum error {err_b:.1e} over {} updates (<= 1e-9); (c) identity vs CE {err_c:.1e} (<= 1e-12); (d) finite-difference rel. error CE {fd_ce:.1e}, selective {fd_sel:.1e}, T scores {fd_t:.1e} (< 1e-4)",
            run.outcome.transition_updates
        ),
    ))
}

fn c6_ablation_direction() -> Check {
    let mut acc = [Vec::new(), Vec::new(), Vec::new()];
    for seed in 0..3 {
        let cfg = blob_config(seed);
        let mut no_init = cfg.clone();
        no_init.ablation.no_init = true;
        let mut base = cfg.clone();
        base.ablation.baseline_ce = true;
        for (slot, c) in acc.iter_mut().zip([cfg, no_init, base]) {
            slot.push(pipeline::run_experiment(&c)?.accuracy);
        }
    }
    let (f, n, b) = (mean(&acc[0]), mean(&acc[1]), mean(&acc[2]));
    Ok((
        f >= n && n >= b && f - b >= 0.01,
        format!(
            "mean accuracy full {:.2}%, no_init {:.2}%, baseline_ce {:.2}% (need full >= no_init >= baseline, full - baseline >= 1.0 pt)",
            100.0 * f,
            100.0 * n,
            100.0 * b
        ),
    ))
}

fn c7_welch_reproduction() -> Check {
    let rows = [
        ((87.30, 0.07), (83.37, 0.25), None),
        ((60.39, 0.08), (53.89, 1.26), Some(0.012)),
        ((91.86, 0.02), (90.37, 0.30), Some(0.013)),
        ((90.61, 0.67), (89.58, 0.26), Some(0.100)),
        ((98.42, 0.03), (98.23, 0.16), Some(0.170)),
        ((65.89, 0.48), (68.45, 0.69), Some(0.0085)),
    ];
    let mut pass = true;
    let mut ps = Vec::new();
    for ((ma, sa), (mb, sb), want) in rows {
        let p = welch_t_test(ma, sa, 3, mb, sb, 3)?.p_value;
        pass &= match want {
            None => p < 0.001,
            Some(w) => (p - w).abs() <= 0.02,
        };
        ps.push(format!("{p:.4}"));
    }
    Ok((
        pass,
        format!("p-values {} vs <0.001, 0.012, 0.013, 0.100, 0.170, 0.0085 (±0.02)", ps.join(", ")),
    ))
}

fn c8_determinism() -> Check {
    let cfg = blob_config(1);
    let a = pipeline::run_experiment(&cfg)?.without_timing().to_json()?;
    let b = pipeline::run_experiment(&cfg)?.without_timing().to_json()?;
    let mut small = mnist_config(1);
    small.data.train_limit = Some(2000);
    small.data.test_limit = Some(1000);
    small.pretrain.epochs = 12;
    small.train.epochs = 3;
    let c = pipeline::run_experiment(&small)?.without_timing().to_json()?;
    let d = pipeline::run_experiment(&small)?.without_timing().to_json()?;
    Ok((
        a == b && c == d,
        format!(
            "blob report {} bytes identical: {}; MNIST-subset report {} bytes identical: {}",
            a.len(),
            a == b,
            c.len(),
            c == d
        ),
    ))
}

fn main() {
    let criteria: [(&str, &str, fn() -> Check); 8] = [
        ("1", "MNIST sym-50% reproduction", c1_mnist_reproduction),
        ("2", "noise detection quality", c2_detection_quality),
        ("3", "EM correctness", c3_em_correctness),
        ("4", "threshold correctness", c4_threshold_correctness),
        ("5", "transition machinery", c5_transition_machinery),
        ("6", "ablation direction", c6_ablation_direction),
        ("7", "Welch test reproduction", c7_welch_reproduction),
        ("8", "determinism", c8_determinism),
    ];
    let only: Option<Vec<String>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').map(|x| x.trim().to_string()).collect());
    let mut failed = 0;
    for (id, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.iter().any(|x| x == id)) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match check() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {id} [{}] {name}: {detail} ({:.1} s)",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
