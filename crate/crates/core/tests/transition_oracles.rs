use dcnet::gmm::NoiseFlags;
use dcnet::nn::{ce_loss_per_sample, Model, Target};
use dcnet::noise::{ground_truth_matrix, NoiseSpec};
use dcnet::transition::{
    corrected_distribution, init_from_predictions, matrix_error, params_from_matrix, selective_loss,
    selective_prob_grad, transition_gradient, update_transition, TransitionMatrix, TransitionParams,
};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_probs(rng: &mut ChaCha8Rng, b: usize, c: usize) -> Array2<f64> {
    let mut p = Array2::from_shape_fn((b, c), |_| rng.random::<f64>() + 0.05);
    for mut row in p.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    p
}

fn random_stochastic(rng: &mut ChaCha8Rng, c: usize) -> TransitionMatrix {
    TransitionMatrix::new(random_probs(rng, c, c)).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `max |analytic - numeric| / max |numeric|`.
fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = numeric.iter().map(|n| n.abs()).fold(1e-12, f64::max);
    diff / scale
}

#[test]
fn score_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (b, c) = (6, 3);
    let probs = random_probs(&mut rng, b, c);
    let observed: Vec<usize> = (0..b).map(|i| i % c).collect();
    let flags = [true, false, true, true, false, true];
    let scores = Array2::from_shape_fn((c, c), |_| rng.random::<f64>() * 2.0 - 1.0);
    let params = TransitionParams::from_scores(scores.clone()).unwrap();
    let analytic = transition_gradient(&probs, &observed, &flags, &params, None).unwrap();

    let loss = |a: &Array2<f64>| {
        let t = TransitionParams::from_scores(a.clone()).unwrap().matrix();
        mean(&selective_loss(&probs, &observed, &flags, &t).unwrap())
    };
    let h = 1e-5;
    let mut numeric = Array2::zeros((c, c));
    for i in 0..c {
        for j in 0..c {
            let mut up = scores.clone();
            up[[i, j]] += h;
            let mut down = scores.clone();
            down[[i, j]] -= h;
            numeric[[i, j]] = (loss(&up) - loss(&down)) / (2.0 * h);
        }
    }
    let err = relative_error(analytic.as_slice().unwrap(), numeric.as_slice().unwrap());
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn model_gradient_of_selective_loss_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut model = Model::init(&[4, 5, 3], 2).unwrap();
    let x = Array2::from_shape_fn((6, 4), |_| rng.random::<f64>() * 2.0 - 1.0);
    let observed = vec![0, 1, 2, 2, 1, 0];
    let flags = [true, false, true, false, true, true];
    let t = random_stochastic(&mut rng, 3);

    let probs = model.forward(x.view()).unwrap();
    let g = selective_prob_grad(&probs, &observed, &flags, &t).unwrap();
    let grads = model.backward(x.view(), &[1.0; 6], Target::ProbGrad(&g)).unwrap();

    let loss = |m: &Model| {
        let p = m.forward(x.view()).unwrap();
        mean(&selective_loss(&p, &observed, &flags, &t).unwrap())
    };
    let h = 1e-5;
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for layer in 0..model.num_layers() {
        let shape = model.weights(layer).dim();
        for i in 0..shape.0 {
            for j in 0..shape.1 {
                let orig = model.weights(layer)[[i, j]];
                model.weights_mut(layer)[[i, j]] = orig + h;
                let up = loss(&model);
                model.weights_mut(layer)[[i, j]] = orig - h;
                let down = loss(&model);
                model.weights_mut(layer)[[i, j]] = orig;
                numeric.push((up - down) / (2.0 * h));
                analytic.push(grads.weights[layer][[i, j]]);
            }
            let orig = model.biases(layer)[i];
            model.biases_mut(layer)[i] = orig + h;
            let up = loss(&model);
            model.biases_mut(layer)[i] = orig - h;
            let down = loss(&model);
            model.biases_mut(layer)[i] = orig;
            numeric.push((up - down) / (2.0 * h));
            analytic.push(grads.biases[layer][i]);
        }
    }
    let err = relative_error(&analytic, &numeric);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn counting_recovers_a_pair_noise_matrix() {
    let c = 10;
    let truth = ground_truth_matrix(NoiseSpec::pair(0.2), c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut preds = Vec::new();
    let mut observed = Vec::new();
    for _ in 0..1000 {
        let y = rng.random_range(0..c);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let k = (0..c)
            .find(|&k| {
                acc += truth.get(y, k);
                u < acc
            })
            .unwrap_or(c - 1);
        preds.push(y);
        observed.push(k);
    }
    let flags = NoiseFlags::all_noisy(1000);
    let est = init_from_predictions(&preds, &observed, &flags, c, 0.0).unwrap();
    let err = matrix_error(&est, &truth).unwrap();
    assert!(err <= 0.05, "matrix error {err}");
}

#[test]
fn score_descent_on_a_fixed_batch() {
    let c = 4;
    let truth = ground_truth_matrix(NoiseSpec::pair(0.3), c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let b = 64;
    let mut probs = Array2::zeros((b, c));
    let mut observed = Vec::new();
    for i in 0..b {
        let y = i % c;
        probs[[i, y]] = 0.9;
        for l in (0..c).filter(|&l| l != y) {
            probs[[i, l]] = 0.1 / (c - 1) as f64;
        }
        observed.push(if rng.random::<f64>() < truth.get(y, y) { y } else { (y + 1) % c });
    }
    let flags = vec![true; b];
    let mut params = params_from_matrix(&TransitionMatrix::identity(c).blend_uniform(0.01)).unwrap();
    let loss = |p: &TransitionParams| mean(&selective_loss(&probs, &observed, &flags, &p.matrix()).unwrap());
    let mut prev = loss(&params);
    let start = prev;
    for step in 0..500 {
        let g = transition_gradient(&probs, &observed, &flags, &params, None).unwrap();
        update_transition(&mut params, &g, 1e-2).unwrap();
        assert!(params.matrix().max_row_sum_error() <= 1e-9);
        let now = loss(&params);
        assert!(now < prev, "step {step}: {prev} -> {now}");
        prev = now;
    }
    assert!(prev < start);
}

fn stochastic_strategy(c: usize) -> impl Strategy<Value = Array2<f64>> {
    proptest::collection::vec(0.01f64..1.0, c * c).prop_map(move |v| {
        let mut a = Array2::from_shape_vec((c, c), v).unwrap();
        for mut row in a.rows_mut() {
            let s = row.sum();
            row /= s;
        }
        a
    })
}

proptest! {
    #[test]
    fn params_round_trip(t in stochastic_strategy(5)) {
        let t = TransitionMatrix::new(t).unwrap();
        let back = params_from_matrix(&t).unwrap().matrix();
        let err = (back.as_array() - t.as_array()).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        prop_assert!(err < 1e-9);
    }

    #[test]
    fn correction_preserves_the_simplex(t in stochastic_strategy(4), p in stochastic_strategy(4)) {
        let t = TransitionMatrix::new(t).unwrap();
        for row in p.rows() {
            let q: Array1<f64> = corrected_distribution(&t, row);
            prop_assert!(q.iter().all(|&v| v >= 0.0));
            prop_assert!((q.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_or_clean_flags_reduce_to_cross_entropy(
        p in stochastic_strategy(4),
        labels in proptest::collection::vec(0usize..4, 4),
        flags in proptest::collection::vec(any::<bool>(), 4),
    ) {
        let ce = ce_loss_per_sample(&p, &labels).unwrap();
        let id = selective_loss(&p, &labels, &flags, &TransitionMatrix::identity(4)).unwrap();
        for (a, b) in id.iter().zip(&ce) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        let t = TransitionMatrix::uniform(4);
        let clean = selective_loss(&p, &labels, &[false; 4], &t).unwrap();
        prop_assert_eq!(clean, ce);
    }

    #[test]
    fn updates_keep_rows_stochastic(
        scores in proptest::collection::vec(-5.0f64..5.0, 9),
        grads in proptest::collection::vec(-50.0f64..50.0, 9),
    ) {
        let mut params = TransitionParams::from_scores(Array2::from_shape_vec((3, 3), scores).unwrap()).unwrap();
        let g = Array2::from_shape_vec((3, 3), grads).unwrap();
        update_transition(&mut params, &g, 0.1).unwrap();
        prop_assert!(params.matrix().max_row_sum_error() <= 1e-9);
    }
}
