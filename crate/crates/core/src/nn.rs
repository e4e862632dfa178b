//! Multi-layer perceptrons and first-order optimizers.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Gradients, Tape, Tensor, Var};
use crate::error::{contract, dim_err, Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputMode {
    /// Rows are softmax distributions (agents).
    Softmax,
    /// Rows are unnormalized scores (the selection net).
    RawScores,
}

/// Layer widths `[input, hidden..., output]` with relu between layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub output_mode: OutputMode,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, output_mode: OutputMode) -> Result<Self> {
        let spec = Self {
            layer_sizes,
            output_mode,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(contract!("an MLP needs at least input and output widths"));
        }
        if self.layer_sizes.contains(&0) {
            return Err(contract!("layer widths must be positive: {:?}", self.layer_sizes));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Same hidden stack with a different output width and mode.
    pub fn with_output(&self, width: usize, output_mode: OutputMode) -> Self {
        let mut layer_sizes = self.layer_sizes.clone();
        *layer_sizes.last_mut().unwrap() = width;
        Self {
            layer_sizes,
            output_mode,
        }
    }
}

/// Weights are stored `fan_in × fan_out` so a layer computes `x·W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub layers: Vec<Layer>,
}

impl ParamSet {
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    w: Tensor::zeros(l.w.shape()),
                    b: Tensor::zeros(l.b.shape()),
                })
                .collect(),
        }
    }

    /// Blocks in order `w0, b0, w1, b1, ...`.
    pub fn blocks(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b])
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b])
    }

    pub fn flat(&self) -> Vec<f64> {
        self.blocks().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        let total: usize = self.blocks().map(Tensor::len).sum();
        if values.len() != total {
            return Err(dim_err("set_flat", &[total], &[values.len()]));
        }
        let mut at = 0;
        for block in self.blocks_mut() {
            let len = block.len();
            block.data_mut().copy_from_slice(&values[at..at + len]);
            at += len;
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.blocks().map(Tensor::len).sum()
    }

    /// Order-sensitive hash of the exact bit patterns.
    pub fn checksum(&self) -> u64 {
        self.blocks()
            .flat_map(|t| t.data().iter())
            .fold(0x8422_2325_cbf2_9ce4, |h, v| {
                rng::mix(h ^ v.to_bits())
            })
    }

    pub fn matches(&self, spec: &MlpSpec) -> bool {
        self.layers.len() + 1 == spec.layer_sizes.len()
            && self.layers.iter().zip(spec.layer_sizes.windows(2)).all(|(l, w)| {
                l.w.shape() == [w[0], w[1]] && l.b.shape() == [w[1]]
            })
    }

    pub fn all_finite(&self) -> bool {
        self.blocks().all(Tensor::all_finite)
    }
}

/// He-style uniform weights in `±√(6/fan_in)`, zero biases.
pub fn init_params(spec: &MlpSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut rng = rng::substream(seed, "init", 0);
    let layers = spec
        .layer_sizes
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = libm::sqrt(6.0 / fan_in as f64);
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Ok(Layer {
                w: Tensor::new(vec![fan_in, fan_out], data)?,
                b: Tensor::zeros(&[fan_out]),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParamSet { layers })
}

/// Tape handles for a registered [`ParamSet`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    layers: Vec<(Var, Var)>,
}

impl ParamVars {
    /// Registers every block as a trainable tape input.
    pub fn register(params: &ParamSet, tape: &mut Tape) -> Self {
        let layers = params
            .layers
            .iter()
            .map(|l| (tape.param(l.w.clone()), tape.param(l.b.clone())))
            .collect();
        Self { layers }
    }

    /// Gradients laid out like `params`; unreachable blocks are zero.
    pub fn gradients(&self, grads: &Gradients, params: &ParamSet) -> ParamSet {
        ParamSet {
            layers: self
                .layers
                .iter()
                .zip(&params.layers)
                .map(|(&(w, b), l)| Layer {
                    w: grads.get_or_zeros(w, &l.w),
                    b: grads.get_or_zeros(b, &l.b),
                })
                .collect(),
        }
    }
}

/// Forward pass on the tape for a batch `x[batch×d]`.
pub fn mlp_forward(spec: &MlpSpec, params: &ParamVars, x: Var, tape: &mut Tape) -> Result<Var> {
    let width = tape.value(x).cols();
    if width != spec.input_width() || tape.value(x).shape().len() != 2 {
        return Err(dim_err("mlp_forward", tape.value(x).shape(), &[spec.input_width()]));
    }
    let last = params.layers.len() - 1;
    let mut h = x;
    for (i, &(w, b)) in params.layers.iter().enumerate() {
        h = tape.matmul(h, w)?;
        h = tape.add_bias(h, b)?;
        if i < last {
            h = tape.relu(h);
        }
    }
    if spec.output_mode == OutputMode::Softmax {
        h = tape.softmax_rows(h);
    }
    Ok(h)
}

/// Tape-free forward pass used for frozen models.
pub fn predict(spec: &MlpSpec, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 || x.cols() != spec.input_width() {
        return Err(dim_err("predict", x.shape(), &[spec.input_width()]));
    }
    let rows = x.rows();
    let last = params.layers.len() - 1;
    let mut h = x.data().to_vec();
    let mut width = x.cols();
    for (i, layer) in params.layers.iter().enumerate() {
        let out = layer.w.shape()[1];
        h = kernels::matmul(&h, layer.w.data(), rows, width, out);
        kernels::add_bias_inplace(&mut h, layer.b.data());
        if i < last {
            kernels::relu_inplace(&mut h);
        }
        width = out;
    }
    if spec.output_mode == OutputMode::Softmax {
        kernels::softmax_rows_inplace(&mut h, width);
    }
    Tensor::new(vec![rows, width], h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    first_moment: Option<ParamSet>,
    second_moment: Option<ParamSet>,
    beta1_power: f64,
    beta2_power: f64,
    step: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(contract!("learning rate must be finite and ≥ 0, got {learning_rate}"));
        }
        Ok(Self {
            kind,
            learning_rate,
            first_moment: None,
            second_moment: None,
            beta1_power: 1.0,
            beta2_power: 1.0,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. A non-finite gradient aborts before any parameter changes.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        if params.layers.len() != grads.layers.len() {
            return Err(dim_err("optimizer_step", &[params.layers.len()], &[grads.layers.len()]));
        }
        for (i, (p, g)) in params.blocks().zip(grads.blocks()).enumerate() {
            if p.shape() != g.shape() {
                return Err(dim_err("optimizer_step", p.shape(), g.shape()));
            }
            if !g.all_finite() {
                let kind = if i % 2 == 0 { "weight" } else { "bias" };
                return Err(Error::NonFinite(format!("gradient of layer {} {kind}", i / 2)));
            }
        }
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.blocks_mut().zip(grads.blocks()) {
                    p.data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(p, g)| *p -= lr * g);
                }
            }
            OptimizerKind::Adam => {
                let m = self.first_moment.get_or_insert_with(|| params.zeros_like());
                let v = self.second_moment.get_or_insert_with(|| params.zeros_like());
                self.beta1_power *= ADAM_BETA1;
                self.beta2_power *= ADAM_BETA2;
                let (c1, c2) = (1.0 - self.beta1_power, 1.0 - self.beta2_power);
                for (((p, g), m), v) in params
                    .blocks_mut()
                    .zip(grads.blocks())
                    .zip(m.blocks_mut())
                    .zip(v.blocks_mut())
                {
                    for (((p, &g), m), v) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *p -= lr * m_hat / (libm::sqrt(v_hat) + ADAM_EPSILON);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f64) -> ParamSet {
        ParamSet {
            layers: vec![Layer {
                w: Tensor::new(vec![1, 1], vec![value]).unwrap(),
                b: Tensor::zeros(&[1]),
            }],
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let spec = MlpSpec::new(vec![5, 7, 3], OutputMode::Softmax).unwrap();
        let a = init_params(&spec, 11).unwrap();
        let b = init_params(&spec, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
        assert!(a.layers.iter().all(|l| l.b.data().iter().all(|&v| v == 0.0)));
        assert_ne!(a, init_params(&spec, 12).unwrap());
        assert!(a.matches(&spec));
    }

    #[test]
    fn weights_respect_he_bound() {
        let spec = MlpSpec::new(vec![24, 10], OutputMode::RawScores).unwrap();
        let p = init_params(&spec, 3).unwrap();
        let bound = (6.0f64 / 24.0).sqrt();
        assert!(p.layers[0].w.data().iter().all(|w| w.abs() < bound));
    }

    #[test]
    fn spec_needs_two_widths() {
        assert!(MlpSpec::new(vec![3], OutputMode::Softmax).is_err());
        assert!(MlpSpec::new(vec![3, 0, 2], OutputMode::Softmax).is_err());
    }

    #[test]
    fn zero_network_gives_uniform_rows() {
        let spec = MlpSpec::new(vec![3, 4, 5], OutputMode::Softmax).unwrap();
        let mut params = init_params(&spec, 0).unwrap();
        let n = params.num_params();
        params.set_flat(&vec![0.0; n]).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.0, 3.0, 1.0]]).unwrap();
        let y = predict(&spec, &params, &x).unwrap();
        assert!(y.data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn single_layer_is_affine() {
        let spec = MlpSpec::new(vec![2, 2], OutputMode::RawScores).unwrap();
        let params = ParamSet {
            layers: vec![Layer {
                w: Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
                b: Tensor::vector(vec![0.5, -0.5]),
            }],
        };
        let x = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert_eq!(predict(&spec, &params, &x).unwrap().data(), &[4.5, 5.5]);

        let mut tape = Tape::new();
        let vars = ParamVars::register(&params, &mut tape);
        let xv = tape.constant(x);
        let out = mlp_forward(&spec, &vars, xv, &mut tape).unwrap();
        assert_eq!(tape.value(out).data(), &[4.5, 5.5]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let spec = MlpSpec::new(vec![3, 2], OutputMode::Softmax).unwrap();
        let params = init_params(&spec, 0).unwrap();
        assert!(predict(&spec, &params, &Tensor::zeros(&[1, 4])).is_err());
    }

    #[test]
    fn sgd_step_and_zero_gradient() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1).unwrap();
        let mut p = single_param(1.0);
        opt.step(&mut p, &single_param(2.0)).unwrap();
        assert!((p.layers[0].w.item() - 0.8).abs() < 1e-15);

        let before = p.clone();
        opt.step(&mut p, &before.zeros_like()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let lr = 0.01;
        let mut opt = Optimizer::new(OptimizerKind::Adam, lr).unwrap();
        let mut p = single_param(1.0);
        let mut g = single_param(1.0);
        g.layers[0].b.data_mut()[0] = 1.0;
        opt.step(&mut p, &g).unwrap();
        // m̂ = v̂ = 1 after bias correction, so the step is lr / (1 + ε).
        let expected = 1.0 - lr / (1.0 + ADAM_EPSILON);
        assert!((p.layers[0].w.item() - expected).abs() < 1e-12);
        assert!((p.layers[0].b.item() + lr / (1.0 + ADAM_EPSILON)).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_names_block_and_leaves_params() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1).unwrap();
        let mut p = single_param(1.0);
        let mut g = single_param(0.0);
        g.layers[0].b.data_mut()[0] = f64::NAN;
        let err = opt.step(&mut p, &g).unwrap_err();
        assert_eq!(err, Error::NonFinite("gradient of layer 0 bias".into()));
        assert_eq!(p, single_param(1.0));
    }

    #[test]
    fn flat_round_trip() {
        let spec = MlpSpec::new(vec![3, 4, 2], OutputMode::Softmax).unwrap();
        let p = init_params(&spec, 5).unwrap();
        let mut q = init_params(&spec, 6).unwrap();
        q.set_flat(&p.flat()).unwrap();
        assert_eq!(p, q);
        assert!(q.set_flat(&[1.0]).is_err());
    }
}
