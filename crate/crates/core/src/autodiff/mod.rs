//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation in insertion order. Inputs always precede
//! the nodes that consume them, so the reverse of insertion order is a valid
//! topological order for [`Tape::backward`]. Besides the usual layer kernels
//! the tape carries custom-Jacobian nodes, which is how a non-differentiable
//! forward (such as a hard top-k mask) is given an externally estimated
//! backward.

pub mod kernels;
mod tensor;

use alloc::vec;
use alloc::vec::Vec;

pub use tensor::Tensor;

use crate::error::{contract, dim_err, Error, Result};

/// Guard added inside the logarithm of [`Tape::nll_loss`].
pub const NLL_DELTA: f64 = 1e-12;

/// Norms at or below this are left unnormalized by [`Tape::normalize_rows`].
pub const NORM_GUARD: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    SoftmaxRows(Var),
    Nll { probs: Var, labels: Vec<usize> },
    Sum(Var),
    Mul(Var, Var),
    NormalizeRows(Var),
    Custom { input: Var, jacobian: Tensor },
    CustomRows { input: Var, jacobians: Tensor },
    BatchedMatVec { mats: Var, vecs: Var },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-writer record of a computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one gradient per node that requires one.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable input whose gradient is reported by `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `a[r×s] · b[s×t]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(dim_err("matmul", av.shape(), bv.shape()));
        }
        let (r, s, t) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let data = kernels::matmul(av.data(), bv.data(), r, s, t);
        let value = Tensor::new(vec![r, t], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Adds `bias[c]` to every row of `x[r×c]`; the only broadcast supported.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.shape().len() != 1 || xv.cols() != bv.len() || xv.shape().len() > 2 {
            return Err(dim_err("add_bias", xv.shape(), bv.shape()));
        }
        let mut value = xv.clone();
        kernels::add_bias_inplace(value.data_mut(), bv.data());
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        kernels::relu_inplace(value.data_mut());
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// Row-wise softmax; a vector is treated as a single row.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let cols = value.cols();
        kernels::softmax_rows_inplace(value.data_mut(), cols);
        let rg = self.rg(&[x]);
        self.push(value, Op::SoftmaxRows(x), rg)
    }

    /// Mean over rows of `-ln(probs[row][label] + δ)`.
    ///
    /// `probs` holds already-normalized probabilities, one row per label.
    pub fn nll_loss(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let pv = self.value(probs);
        let (rows, cols) = (pv.rows(), pv.cols());
        if labels.len() != rows || pv.shape().len() > 2 {
            return Err(dim_err("nll_loss", pv.shape(), &[labels.len()]));
        }
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            if label >= cols {
                return Err(Error::Index {
                    index: label,
                    len: cols,
                });
            }
            total -= libm::log(pv.data()[i * cols + label] + NLL_DELTA);
        }
        let value = Tensor::scalar(total / rows as f64);
        let rg = self.rg(&[probs]);
        Ok(self.push(
            value,
            Op::Nll {
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err("mul", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Divides each row by its L2 norm; rows with norm ≤ [`NORM_GUARD`] pass through.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let cols = value.cols();
        for row in value.data_mut().chunks_exact_mut(cols) {
            let norm = kernels::l2_norm(row);
            if norm > NORM_GUARD {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        let rg = self.rg(&[x]);
        self.push(value, Op::NormalizeRows(x), rg)
    }

    /// Emits `value` verbatim; backward routes `upstream · jacobian` to `input`.
    ///
    /// `jacobian` is `len(value) × len(input)`, entry `[i][j] = ∂value_i/∂input_j`.
    pub fn custom(&mut self, value: Tensor, input: Var, jacobian: Tensor) -> Result<Var> {
        let in_len = self.value(input).len();
        if jacobian.shape() != [value.len(), in_len] {
            return Err(dim_err(
                "custom",
                jacobian.shape(),
                &[value.len(), in_len],
            ));
        }
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Custom { input, jacobian }, rg))
    }

    /// Block-diagonal variant of [`Tape::custom`]: row `r` of `values[R×p]`
    /// depends only on row `r` of `input[R×q]` through `jacobians[r]` (`p×q`).
    pub fn custom_rows(&mut self, values: Tensor, input: Var, jacobians: Tensor) -> Result<Var> {
        let iv = self.value(input);
        let (rows, p, q) = (values.rows(), values.cols(), iv.cols());
        if iv.rows() != rows || jacobians.shape() != [rows, p, q] {
            return Err(dim_err("custom_rows", jacobians.shape(), &[rows, p, q]));
        }
        let rg = self.rg(&[input]);
        Ok(self.push(values, Op::CustomRows { input, jacobians }, rg))
    }

    /// `out[r] = mats[r] · vecs[r]` for `mats[R×c×n]`, `vecs[R×n]`.
    pub fn batched_matvec(&mut self, mats: Var, vecs: Var) -> Result<Var> {
        let (mv, vv) = (self.value(mats), self.value(vecs));
        let ms = mv.shape();
        if ms.len() != 3 || vv.rows() != ms[0] || vv.cols() != ms[2] {
            return Err(dim_err("batched_matvec", ms, vv.shape()));
        }
        let (rows, c, n) = (ms[0], ms[1], ms[2]);
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let b = &vv.data()[r * n..(r + 1) * n];
            for i in 0..c {
                let m_row = &mv.data()[(r * c + i) * n..(r * c + i + 1) * n];
                out[r * c + i] = m_row.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
        let value = Tensor::new(vec![rows, c], out)?;
        let rg = self.rg(&[mats, vecs]);
        Ok(self.push(value, Op::BatchedMatVec { mats, vecs }, rg))
    }

    /// Gradients of the scalar `loss` with respect to every node that requires one.
    ///
    /// The tape is not modified, so calling this twice gives identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(contract!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|data| Tensor::new(node.value.shape().to_vec(), data))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (r, s, t) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if wants(*a) {
                    accumulate(grads, *a, kernels::matmul_bt(g, bv.data(), r, s, t));
                }
                if wants(*b) {
                    accumulate(grads, *b, kernels::matmul_at(av.data(), g, r, s, t));
                }
            }
            Op::AddBias(x, bias) => {
                if wants(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if wants(*bias) {
                    let c = self.value(*bias).len();
                    let mut gb = vec![0.0; c];
                    for row in g.chunks_exact(c) {
                        gb.iter_mut().zip(row).for_each(|(acc, v)| *acc += v);
                    }
                    accumulate(grads, *bias, gb);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                accumulate(grads, *x, gx);
            }
            Op::SoftmaxRows(x) => {
                let cols = node.value.cols();
                let mut gx = vec![0.0; g.len()];
                for ((y, gr), out) in node
                    .value
                    .data()
                    .chunks_exact(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(gx.chunks_exact_mut(cols))
                {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..cols {
                        out[i] = y[i] * (gr[i] - dot);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Nll { probs, labels } => {
                let pv = self.value(*probs);
                let cols = pv.cols();
                let scale = g[0] / labels.len() as f64;
                let mut gp = vec![0.0; pv.len()];
                for (i, &label) in labels.iter().enumerate() {
                    let at = i * cols + label;
                    gp[at] = -scale / (pv.data()[at] + NLL_DELTA);
                }
                accumulate(grads, *probs, gp);
            }
            Op::Sum(x) => {
                let len = self.value(*x).len();
                accumulate(grads, *x, vec![g[0]; len]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if wants(*a) {
                    accumulate(grads, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            Op::NormalizeRows(x) => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let mut gx = vec![0.0; g.len()];
                for ((xr, (yr, gr)), out) in xv
                    .data()
                    .chunks_exact(cols)
                    .zip(node.value.data().chunks_exact(cols).zip(g.chunks_exact(cols)))
                    .zip(gx.chunks_exact_mut(cols))
                {
                    let norm = kernels::l2_norm(xr);
                    if norm > NORM_GUARD {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for i in 0..cols {
                            out[i] = (gr[i] - yr[i] * dot) / norm;
                        }
                    } else {
                        out.copy_from_slice(gr);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Custom { input, jacobian } => {
                let q = jacobian.shape()[1];
                let mut gi = vec![0.0; q];
                for (gv, j_row) in g.iter().zip(jacobian.data().chunks_exact(q)) {
                    if *gv != 0.0 {
                        gi.iter_mut().zip(j_row).for_each(|(acc, j)| *acc += gv * j);
                    }
                }
                accumulate(grads, *input, gi);
            }
            Op::CustomRows { input, jacobians } => {
                let s = jacobians.shape();
                let (rows, p, q) = (s[0], s[1], s[2]);
                let mut gi = vec![0.0; rows * q];
                for r in 0..rows {
                    let out = &mut gi[r * q..(r + 1) * q];
                    for i in 0..p {
                        let gv = g[r * p + i];
                        if gv == 0.0 {
                            continue;
                        }
                        let j_row = &jacobians.data()[(r * p + i) * q..(r * p + i + 1) * q];
                        out.iter_mut().zip(j_row).for_each(|(acc, j)| *acc += gv * j);
                    }
                }
                accumulate(grads, *input, gi);
            }
            Op::BatchedMatVec { mats, vecs } => {
                let (mv, vv) = (self.value(*mats), self.value(*vecs));
                let ms = mv.shape();
                let (rows, c, n) = (ms[0], ms[1], ms[2]);
                if wants(*vecs) {
                    let mut gv = vec![0.0; rows * n];
                    for r in 0..rows {
                        for i in 0..c {
                            let gri = g[r * c + i];
                            let m_row = &mv.data()[(r * c + i) * n..(r * c + i + 1) * n];
                            gv[r * n..(r + 1) * n]
                                .iter_mut()
                                .zip(m_row)
                                .for_each(|(acc, m)| *acc += gri * m);
                        }
                    }
                    accumulate(grads, *vecs, gv);
                }
                if wants(*mats) {
                    let mut gm = vec![0.0; mv.len()];
                    for r in 0..rows {
                        let b = &vv.data()[r * n..(r + 1) * n];
                        for i in 0..c {
                            let gri = g[r * c + i];
                            gm[(r * c + i) * n..(r * c + i + 1) * n]
                                .iter_mut()
                                .zip(b)
                                .for_each(|(acc, bj)| *acc = gri * bj);
                        }
                    }
                    accumulate(grads, *mats, gm);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, contribution: Vec<f64>) {
    match &mut grads[var.0] {
        Some(existing) => existing
            .iter_mut()
            .zip(contribution)
            .for_each(|(e, c)| *e += c),
        slot @ None => *slot = Some(contribution),
    }
}
