use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smartensemble_core::autodiff::{Tape, Tensor};
use smartensemble_core::nn::{
    init_params, mlp_forward, predict, MlpSpec, Optimizer, OptimizerKind, OutputMode, ParamSet,
    ParamVars, ADAM_EPSILON,
};

fn loss_and_grads(spec: &MlpSpec, params: &ParamSet, x: &Tensor, labels: &[usize]) -> (f64, ParamSet) {
    let mut tape = Tape::new();
    let vars = ParamVars::register(params, &mut tape);
    let xv = tape.constant(x.clone());
    let out = mlp_forward(spec, &vars, xv, &mut tape).unwrap();
    let loss = tape.nll_loss(out, labels).unwrap();
    let grads = tape.backward(loss).unwrap();
    (tape.value(loss).item(), vars.gradients(&grads, params))
}

fn accuracy(spec: &MlpSpec, params: &ParamSet, x: &Tensor, labels: &[usize]) -> f64 {
    let probs = predict(spec, params, x).unwrap();
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = probs.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

#[test]
fn he_uniform_moments() {
    let fan_in = 500;
    let spec = MlpSpec::new(vec![fan_in, 200], OutputMode::RawScores).unwrap();
    let params = init_params(&spec, 9).unwrap();
    let w = params.layers[0].w.data();
    let n = w.len() as f64;
    let bound = (6.0 / fan_in as f64).sqrt();
    assert!(w.iter().all(|v| v.abs() <= bound));
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sigma = (2.0 / fan_in as f64).sqrt();
    assert!(mean.abs() < 3.0 * sigma / n.sqrt(), "mean {mean}");
    assert!((var / (sigma * sigma) - 1.0).abs() < 0.02, "variance {var}");
    assert!(params.layers[0].b.data().iter().all(|&b| b == 0.0));
}

#[test]
fn init_depends_only_on_seed() {
    let spec = MlpSpec::new(vec![3, 4, 2], OutputMode::Softmax).unwrap();
    assert_eq!(init_params(&spec, 1).unwrap(), init_params(&spec, 1).unwrap());
    assert_ne!(init_params(&spec, 1).unwrap(), init_params(&spec, 2).unwrap());
}

#[test]
fn sgd_fits_a_separable_toy_set() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..40 {
        let y = i % 2;
        let centre = if y == 0 { -1.0 } else { 1.0 };
        rows.push(centre + rng.random_range(-0.5..0.5));
        rows.push(rng.random_range(-1.0..1.0));
        labels.push(y);
    }
    let x = Tensor::new(vec![40, 2], rows).unwrap();
    let spec = MlpSpec::new(vec![2, 8, 2], OutputMode::Softmax).unwrap();
    let mut params = init_params(&spec, 5).unwrap();
    let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5).unwrap();
    let mut reached = None;
    for step in 0..500 {
        if accuracy(&spec, &params, &x, &labels) == 1.0 {
            reached = Some(step);
            break;
        }
        let (_, g) = loss_and_grads(&spec, &params, &x, &labels);
        opt.step(&mut params, &g).unwrap();
    }
    assert!(reached.is_some(), "never reached 100% in 500 steps");
}

#[test]
fn adam_first_step_moves_by_learning_rate_times_sign() {
    let spec = MlpSpec::new(vec![3, 2], OutputMode::Softmax).unwrap();
    let mut params = init_params(&spec, 1).unwrap();
    let before = params.flat();
    let mut grads = params.zeros_like();
    let g: Vec<f64> = (0..grads.num_params()).map(|i| (i as f64 - 3.5) * 0.3).collect();
    grads.set_flat(&g).unwrap();
    let lr = 0.01;
    Optimizer::new(OptimizerKind::Adam, lr)
        .unwrap()
        .step(&mut params, &grads)
        .unwrap();
    for ((p0, p1), g) in before.iter().zip(params.flat()).zip(g) {
        // Bias-corrected moments are g and g² after one step.
        let want = p0 - lr * g / (g.abs() + ADAM_EPSILON);
        assert!((p1 - want).abs() < 1e-15, "{p1} vs {want}");
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let spec = MlpSpec::new(vec![4, 5, 3], OutputMode::Softmax).unwrap();
    let x = Tensor::new(vec![2, 4], vec![0.1, -0.2, 0.3, 0.4, 1.0, 0.0, -1.0, 0.5]).unwrap();
    for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let mut params = init_params(&spec, 2).unwrap();
        let before = params.clone();
        let mut opt = Optimizer::new(kind, 0.0).unwrap();
        for _ in 0..5 {
            let (_, g) = loss_and_grads(&spec, &params, &x, &[0, 2]);
            opt.step(&mut params, &g).unwrap();
        }
        assert_eq!(params, before);
    }
}

#[test]
fn small_step_sgd_loss_does_not_increase() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::new(vec![100, 6], (0..600).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let labels: Vec<usize> = (0..100).map(|_| rng.random_range(0..3)).collect();
    let spec = MlpSpec::new(vec![6, 16, 3], OutputMode::Softmax).unwrap();
    let mut params = init_params(&spec, 8).unwrap();
    let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.01).unwrap();
    let (mut prev, mut g) = loss_and_grads(&spec, &params, &x, &labels);
    let first = prev;
    for _ in 0..100 {
        opt.step(&mut params, &g).unwrap();
        let (loss, next) = loss_and_grads(&spec, &params, &x, &labels);
        assert!(loss <= prev * 1.05, "{loss} after {prev}");
        prev = loss;
        g = next;
    }
    assert!(prev < first);
}

#[test]
fn zero_weights_give_a_uniform_distribution() {
    let spec = MlpSpec::new(vec![3, 4, 5], OutputMode::Softmax).unwrap();
    let mut params = init_params(&spec, 0).unwrap();
    let zeros = vec![0.0; params.num_params()];
    params.set_flat(&zeros).unwrap();
    let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.5, 0.5]).unwrap();
    let out = predict(&spec, &params, &x).unwrap();
    assert!(out.data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
}

#[test]
fn non_finite_gradient_aborts_without_touching_parameters() {
    let spec = MlpSpec::new(vec![2, 2], OutputMode::Softmax).unwrap();
    let mut params = init_params(&spec, 0).unwrap();
    let before = params.clone();
    let mut grads = params.zeros_like();
    grads.layers[0].b.data_mut()[1] = f64::NAN;
    let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1).unwrap();
    assert!(opt.step(&mut params, &grads).is_err());
    assert_eq!(params, before);
    assert_eq!(opt.steps_taken(), 0);
}
