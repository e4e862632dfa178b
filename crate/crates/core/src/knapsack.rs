//! The knapsack layer: differentiable top-k selection.
//!
//! Forward is the exact solution of the unweighted knapsack
//! `max ĉᵀb s.t. 1ᵀb = k, b ∈ {0,1}ⁿ`, i.e. the indicator of the `k` largest
//! scores. Backward is the Jacobian of the Gaussian-perturbed optimizer
//! `𝕂(ĉ) = E[𝒦(ĉ + εZ)]`, estimated from `m` noise draws as
//! `(s/m) Σᵢ 𝒦(ĉ + εzᵢ) zᵢᵀ`.

use alloc::collections::BinaryHeap;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Tape, Tensor, Var, NORM_GUARD};
use crate::error::{contract, Error, Result};
use crate::rng;

/// Noise draws accumulated sequentially before the pairwise reduction.
const REDUCTION_BLOCK: usize = 64;

/// Scale applied to the Monte-Carlo Jacobian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradScaling {
    /// `1/ε`, the Gaussian perturbed-optimizer gradient.
    #[default]
    Berthet,
    /// No temperature factor.
    Unscaled,
}

/// Where the L2 normalization of the scores sits relative to the solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationOrder {
    /// Normalize on the tape, then solve and differentiate at the unit-norm scores.
    #[default]
    NormalizeFirst,
    /// Solve on the raw scores; the Jacobian is taken at the normalized scores
    /// and chained straight to the raw scores.
    SolveFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnapsackConfig {
    pub k: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub grad_scaling: GradScaling,
    #[serde(default)]
    pub order: NormalizationOrder,
    #[serde(default)]
    pub noise_seed: u64,
}

pub fn default_epsilon() -> f64 {
    1.0
}

pub fn default_samples() -> usize {
    100
}

impl KnapsackConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            epsilon: default_epsilon(),
            samples: default_samples(),
            grad_scaling: GradScaling::default(),
            order: NormalizationOrder::default(),
            noise_seed: 0,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        check_k(self.k, n)?;
        if self.samples == 0 {
            return Err(contract!("noise sample count m must be ≥ 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(contract!("temperature ε must be > 0, got {}", self.epsilon));
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        match self.grad_scaling {
            GradScaling::Berthet => 1.0 / self.epsilon,
            GradScaling::Unscaled => 1.0,
        }
    }
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(contract!("sub-ensemble size must satisfy 1 ≤ k ≤ n, got k={k}, n={n}"));
    }
    Ok(())
}

/// Binary n-vector with exactly `k` ones.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SelectionMask {
    bits: Vec<bool>,
}

impl SelectionMask {
    /// Mask selecting `indices` out of `n`.
    pub fn from_indices(n: usize, indices: &[usize]) -> Result<Self> {
        let mut bits = vec![false; n];
        for &i in indices {
            if i >= n {
                return Err(Error::Index { index: i, len: n });
            }
            if bits[i] {
                return Err(contract!("index {i} selected twice"));
            }
            bits[i] = true;
        }
        Ok(Self { bits })
    }

    pub fn all(n: usize) -> Self {
        Self {
            bits: vec![true; n],
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.bits.get(i).copied().unwrap_or(false)
    }

    pub fn selected(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn to_vector(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// `ĉᵀb`.
    pub fn objective(&self, scores: &[f64]) -> f64 {
        self.selected().map(|i| scores[i]).sum()
    }
}

/// Heap entry ordered so the heap's maximum is the weakest kept candidate:
/// lower score is weaker, and on equal scores the higher index is weaker.
#[derive(Clone, Copy)]
struct Candidate {
    score: f64,
    index: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then(self.index.cmp(&other.index))
    }
}

/// Reusable scratch for repeated top-k solves.
#[derive(Default)]
struct TopK {
    heap: BinaryHeap<Candidate>,
}

impl TopK {
    /// Indices of the `k` largest scores in `O(n log k)`; lower index wins ties.
    fn solve<'a>(&'a mut self, scores: &[f64], k: usize) -> impl Iterator<Item = usize> + 'a {
        self.heap.clear();
        for (index, &score) in scores.iter().enumerate() {
            // `+ 0.0` folds -0.0 into 0.0 so signed zeros tie by index.
            let cand = Candidate {
                score: score + 0.0,
                index,
            };
            if self.heap.len() < k {
                self.heap.push(cand);
            } else if let Some(mut weakest) = self.heap.peek_mut() {
                if cand < *weakest {
                    *weakest = cand;
                }
            }
        }
        self.heap.iter().map(|c| c.index)
    }
}

/// Exact top-k mask of `scores`.
pub fn topk_select(scores: &[f64], k: usize) -> Result<SelectionMask> {
    check_k(k, scores.len())?;
    if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
        return Err(contract!("score {i} is not finite"));
    }
    let mut solver = TopK::default();
    let mut bits = vec![false; scores.len()];
    for i in solver.solve(scores, k) {
        bits[i] = true;
    }
    Ok(SelectionMask { bits })
}

/// `ĉ/‖ĉ‖₂`, or `ĉ` unchanged when the norm is at most [`NORM_GUARD`].
pub fn normalize_scores(scores: &[f64]) -> Vec<f64> {
    let norm = kernels::l2_norm(scores);
    if norm > NORM_GUARD {
        scores.iter().map(|v| v / norm).collect()
    } else {
        scores.to_vec()
    }
}

/// `m` standard-normal n-vectors, stored row-major `m×n`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBatch {
    n: usize,
    z: Vec<f64>,
}

impl NoiseBatch {
    /// Draws from the counter stream `stream` of the `noise` substream of `seed`.
    pub fn sample(n: usize, m: usize, seed: u64, stream: u64) -> Self {
        let mut rng = rng::substream(seed, rng::NOISE, stream);
        let z = (0..n * m).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self { n, z }
    }

    pub fn from_rows(n: usize, z: Vec<f64>) -> Result<Self> {
        if n == 0 || z.len() % n != 0 {
            return Err(contract!("noise buffer of {} values is not a multiple of n={n}", z.len()));
        }
        Ok(Self { n, z })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn samples(&self) -> usize {
        self.z.len() / self.n
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.z[i * self.n..(i + 1) * self.n]
    }
}

/// Sums equal-length partial results by a fixed binary tree.
fn pairwise_reduce(mut parts: Vec<Vec<f64>>) -> Vec<f64> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut left) = it.next() {
            if let Some(right) = it.next() {
                left.iter_mut().zip(right).for_each(|(l, r)| *l += r);
            }
            next.push(left);
        }
        parts = next;
    }
    parts.pop().unwrap_or_default()
}

/// Runs `visit(selected, z)` for every noise draw, accumulating into a
/// `width`-long buffer block by block, then reduces the blocks pairwise.
fn perturbed_accumulate<F>(
    scores: &[f64],
    k: usize,
    epsilon: f64,
    noise: &NoiseBatch,
    width: usize,
    mut visit: F,
) -> Vec<f64>
where
    F: FnMut(&mut [f64], &[usize], &[f64]),
{
    let n = scores.len();
    let mut solver = TopK::default();
    let mut perturbed = vec![0.0; n];
    let mut chosen = Vec::with_capacity(k);
    let mut blocks = Vec::new();
    for start in (0..noise.samples()).step_by(REDUCTION_BLOCK) {
        let end = (start + REDUCTION_BLOCK).min(noise.samples());
        let mut acc = vec![0.0; width];
        for s in start..end {
            let z = noise.get(s);
            for ((p, &c), &zi) in perturbed.iter_mut().zip(scores).zip(z) {
                *p = c + epsilon * zi;
            }
            chosen.clear();
            chosen.extend(solver.solve(&perturbed, k));
            visit(&mut acc, &chosen, z);
        }
        blocks.push(acc);
    }
    pairwise_reduce(blocks)
}

fn check_noise(scores: &[f64], noise: &NoiseBatch) -> Result<()> {
    if noise.dim() != scores.len() {
        return Err(crate::error::dim_err("noise", &[noise.dim()], &[scores.len()]));
    }
    if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
        return Err(contract!("score {i} is not finite"));
    }
    Ok(())
}

/// Monte-Carlo estimate of `𝕂(ĉ) = E[𝒦(ĉ + εz)]` over the given draws.
pub fn smoothed_forward_with(
    scores: &[f64],
    k: usize,
    epsilon: f64,
    noise: &NoiseBatch,
) -> Result<Vec<f64>> {
    check_k(k, scores.len())?;
    check_noise(scores, noise)?;
    let m = noise.samples() as f64;
    let counts = perturbed_accumulate(scores, k, epsilon, noise, scores.len(), |acc, chosen, _| {
        for &i in chosen {
            acc[i] += 1.0;
        }
    });
    Ok(counts.into_iter().map(|c| c / m).collect())
}

/// [`smoothed_forward_with`] using `config.samples` draws from `config.noise_seed`.
pub fn smoothed_forward(scores: &[f64], config: &KnapsackConfig) -> Result<Vec<f64>> {
    config.validate(scores.len())?;
    let noise = NoiseBatch::sample(scores.len(), config.samples, config.noise_seed, 0);
    smoothed_forward_with(scores, config.k, config.epsilon, &noise)
}

/// Monte-Carlo Jacobian `J[i][j] = ∂𝕂_i/∂ĉ_j ≈ (scale/m) Σ 𝒦(ĉ+εz)_i z_j`.
pub fn perturbed_jacobian_with(
    scores: &[f64],
    k: usize,
    epsilon: f64,
    scale: f64,
    noise: &NoiseBatch,
) -> Result<Tensor> {
    check_k(k, scores.len())?;
    check_noise(scores, noise)?;
    let n = scores.len();
    let sums = perturbed_accumulate(scores, k, epsilon, noise, n * n, |acc, chosen, z| {
        for &i in chosen {
            acc[i * n..(i + 1) * n]
                .iter_mut()
                .zip(z)
                .for_each(|(a, zj)| *a += zj);
        }
    });
    let factor = scale / noise.samples() as f64;
    Tensor::new(vec![n, n], sums.into_iter().map(|v| v * factor).collect())
}

/// [`perturbed_jacobian_with`] using `config.samples` draws from `config.noise_seed`.
pub fn perturbed_jacobian(scores: &[f64], config: &KnapsackConfig) -> Result<Tensor> {
    config.validate(scores.len())?;
    let noise = NoiseBatch::sample(scores.len(), config.samples, config.noise_seed, 0);
    perturbed_jacobian_with(scores, config.k, config.epsilon, config.scale(), &noise)
}

/// Knapsack layer on the tape for a batch of score rows `scores[B×n]`.
///
/// Emits the hard top-k masks `[B×n]`; backward applies the per-row
/// perturbed Jacobian estimated from `noise`.
pub fn knapsack_layer(
    tape: &mut Tape,
    scores: Var,
    config: &KnapsackConfig,
    noise: &NoiseBatch,
) -> Result<Var> {
    layer(tape, scores, config, noise, false)
}

/// Diagnostic variant of [`knapsack_layer`] whose forward emits the smoothed
/// `𝕂(ĉ)` instead of the hard mask. Backward is identical.
pub fn smoothed_knapsack_layer(
    tape: &mut Tape,
    scores: Var,
    config: &KnapsackConfig,
    noise: &NoiseBatch,
) -> Result<Var> {
    layer(tape, scores, config, noise, true)
}

fn layer(
    tape: &mut Tape,
    scores: Var,
    config: &KnapsackConfig,
    noise: &NoiseBatch,
    smoothed: bool,
) -> Result<Var> {
    let n = tape.value(scores).cols();
    config.validate(n)?;
    let (input, solve_at_input) = match config.order {
        NormalizationOrder::NormalizeFirst => (tape.normalize_rows(scores), true),
        NormalizationOrder::SolveFirst => (scores, false),
    };
    let rows = tape.value(input).rows();
    let mut values = Vec::with_capacity(rows * n);
    let mut jacobians = Vec::with_capacity(rows * n * n);
    for r in 0..rows {
        let raw = tape.value(input).row(r);
        let unit = if solve_at_input {
            raw.to_vec()
        } else {
            normalize_scores(raw)
        };
        if smoothed {
            values.extend(smoothed_forward_with(&unit, config.k, config.epsilon, noise)?);
        } else {
            values.extend(topk_select(raw, config.k)?.to_vector());
        }
        let jac = perturbed_jacobian_with(&unit, config.k, config.epsilon, config.scale(), noise)?;
        jacobians.extend_from_slice(jac.data());
    }
    let values = Tensor::new(vec![rows, n], values)?;
    let jacobians = Tensor::new(vec![rows, n, n], jacobians)?;
    tape.custom_rows(values, input, jacobians)
}
