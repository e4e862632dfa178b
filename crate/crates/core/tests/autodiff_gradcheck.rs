use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smartensemble_core::autodiff::{kernels, Tape, Tensor, Var};
use smartensemble_core::nn::{init_params, mlp_forward, predict, MlpSpec, OutputMode, ParamVars};

const H: f64 = 1e-6;
const TOL: f64 = 1e-5;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Compares reverse-mode gradients of every input against central
/// differences. `build` gets fresh leaves and returns the scalar loss.
fn gradcheck(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();

    let eval = |perturbed: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).item()
    };
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[which], input);
        for j in 0..input.len() {
            let mut probe = inputs.to_vec();
            probe[which].data_mut()[j] += H;
            let up = eval(&probe);
            probe[which].data_mut()[j] -= 2.0 * H;
            let down = eval(&probe);
            let numeric = (up - down) / (2.0 * H);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            assert!(rel < TOL, "input {which} entry {j}: analytic {a} numeric {numeric}");
        }
    }
}

/// Entries bounded away from zero so relu stays differentiable under ±H.
fn away_from_zero(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v = 0.05_f64.copysign(*v);
        }
    }
    t
}

#[test]
fn matmul_matches_a_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (r, s, t) in [(1, 1, 1), (3, 4, 5), (7, 2, 9), (16, 33, 8)] {
        let a = random_tensor(&mut rng, &[r, s]);
        let b = random_tensor(&mut rng, &[s, t]);
        let got = kernels::matmul(a.data(), b.data(), r, s, t);
        for i in 0..r {
            for j in 0..t {
                let mut acc = 0.0;
                for l in 0..s {
                    acc += a.data()[i * s + l] * b.data()[l * t + j];
                }
                assert!((got[i * t + j] - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn softmax_of_one_two_three_matches_high_precision_values() {
    // Computed with 50-digit decimal arithmetic.
    let exact = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219];
    let mut row = [1.0, 2.0, 3.0];
    kernels::softmax_inplace(&mut row);
    for (got, want) in row.iter().zip(exact) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn gradcheck_matmul_and_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [
        random_tensor(&mut rng, &[3, 4]),
        random_tensor(&mut rng, &[4, 2]),
        random_tensor(&mut rng, &[2]),
        random_tensor(&mut rng, &[3, 2]),
    ];
    gradcheck(&inputs, |tape, v| {
        let y = tape.matmul(v[0], v[1]).unwrap();
        let y = tape.add_bias(y, v[2]).unwrap();
        let y = tape.mul(y, v[3]).unwrap();
        tape.sum(y)
    });
}

#[test]
fn gradcheck_relu() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = [
        away_from_zero(random_tensor(&mut rng, &[4, 5])),
        random_tensor(&mut rng, &[4, 5]),
    ];
    gradcheck(&inputs, |tape, v| {
        let y = tape.relu(v[0]);
        let y = tape.mul(y, v[1]).unwrap();
        tape.sum(y)
    });
}

#[test]
fn gradcheck_softmax_and_nll() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = [random_tensor(&mut rng, &[5, 4])];
    let labels = [0, 3, 1, 1, 2];
    gradcheck(&inputs, |tape, v| {
        let p = tape.softmax_rows(v[0]);
        tape.nll_loss(p, &labels).unwrap()
    });
}

#[test]
fn gradcheck_normalize_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = [random_tensor(&mut rng, &[3, 6]), random_tensor(&mut rng, &[3, 6])];
    gradcheck(&inputs, |tape, v| {
        let y = tape.normalize_rows(v[0]);
        let y = tape.mul(y, v[1]).unwrap();
        tape.sum(y)
    });
}

#[test]
fn gradcheck_batched_matvec() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = [
        random_tensor(&mut rng, &[4, 3, 5]),
        random_tensor(&mut rng, &[4, 5]),
    ];
    let labels = [2, 0, 1, 1];
    gradcheck(&inputs, |tape, v| {
        let y = tape.batched_matvec(v[0], v[1]).unwrap();
        let p = tape.softmax_rows(y);
        tape.nll_loss(p, &labels).unwrap()
    });
}

#[test]
fn custom_rows_routes_upstream_through_each_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (rows, p, q) = (3, 2, 4);
    let x = random_tensor(&mut rng, &[rows, q]);
    let jac = random_tensor(&mut rng, &[rows, p, q]);
    let upstream = random_tensor(&mut rng, &[rows, p]);

    let mut tape = Tape::new();
    let xv = tape.param(x);
    let y = tape
        .custom_rows(Tensor::zeros(&[rows, p]), xv, jac.clone())
        .unwrap();
    let w = tape.constant(upstream.clone());
    let prod = tape.mul(y, w).unwrap();
    let loss = tape.sum(prod);
    let g = tape.backward(loss).unwrap();
    for r in 0..rows {
        for j in 0..q {
            let want: f64 = (0..p)
                .map(|i| upstream.data()[r * p + i] * jac.data()[(r * p + i) * q + j])
                .sum();
            assert!((g.get(xv).unwrap().data()[r * q + j] - want).abs() < 1e-14);
        }
    }
}

fn mlp_gradcheck(widths: Vec<usize>, seed: u64) {
    let spec = MlpSpec::new(widths.clone(), OutputMode::Softmax).unwrap();
    let mut params = init_params(&spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut params.layers {
        for b in layer.b.data_mut() {
            *b = rng.random_range(-0.1..0.1);
        }
    }
    let x = random_tensor(&mut rng, &[6, widths[0]]);
    let labels: Vec<usize> = (0..6).map(|i| i % widths[widths.len() - 1]).collect();
    let inputs: Vec<Tensor> = params.blocks().cloned().collect();
    let n_layers = params.layers.len();

    // The forward must agree with the tape-free path before checking gradients.
    let mut tape = Tape::new();
    let vars = ParamVars::register(&params, &mut tape);
    let xv = tape.constant(x.clone());
    let out = mlp_forward(&spec, &vars, xv, &mut tape).unwrap();
    let frozen = predict(&spec, &params, &x).unwrap();
    for (a, b) in tape.value(out).data().iter().zip(frozen.data()) {
        assert!((a - b).abs() < 1e-14);
    }

    gradcheck(&inputs, |tape, v| {
        let x = tape.constant(x.clone());
        let mut h = x;
        for i in 0..n_layers {
            h = tape.matmul(h, v[2 * i]).unwrap();
            h = tape.add_bias(h, v[2 * i + 1]).unwrap();
            if i + 1 < n_layers {
                h = tape.relu(h);
            }
        }
        let p = tape.softmax_rows(h);
        tape.nll_loss(p, &labels).unwrap()
    });
}

#[test]
fn gradcheck_two_layer_mlp() {
    mlp_gradcheck(vec![5, 7, 3], 11);
}

#[test]
fn gradcheck_three_layer_mlp() {
    mlp_gradcheck(vec![4, 8, 6, 3], 12);
}

#[test]
fn backward_is_deterministic() {
    let spec = MlpSpec::new(vec![6, 10, 4], OutputMode::Softmax).unwrap();
    let params = init_params(&spec, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, &[8, 6]);
    let labels = [0, 1, 2, 3, 0, 1, 2, 3];
    let run = || {
        let mut tape = Tape::new();
        let vars = ParamVars::register(&params, &mut tape);
        let xv = tape.constant(x.clone());
        let out = mlp_forward(&spec, &vars, xv, &mut tape).unwrap();
        let loss = tape.nll_loss(out, &labels).unwrap();
        let grads = tape.backward(loss).unwrap();
        let again = tape.backward(loss).unwrap();
        let a = vars.gradients(&grads, &params).flat();
        assert_eq!(a, vars.gradients(&again, &params).flat());
        a
    };
    let (first, second) = (run(), run());
    assert!(first.iter().zip(&second).all(|(a, b)| a.to_bits() == b.to_bits()));
}
