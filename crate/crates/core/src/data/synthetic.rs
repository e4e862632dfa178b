//! Synthetic specialized-ensemble task.
//!
//! Features are Gaussian blobs around per-class centers; the label of a
//! sample is the class of its nearest center. Each oracle agent is a fixed
//! function of the features: it is right with probability `p_s` on its
//! specialty classes and `p_c` elsewhere. Correctness draws mix a per-sample
//! "difficulty" uniform shared by all agents with an agent-private uniform,
//! so errors are correlated across agents while each agent's marginal
//! accuracy stays exact. A wrong agent usually votes for one of its own
//! specialty classes, which is how trained specialists fail.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{enumerate_specializations, Dataset, Split};
use crate::error::{contract, Result};
use crate::ensemble::{AgentKind, AgentModel, AgentStats};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub classes: usize,
    pub dim: usize,
    /// Row-major `classes × dim`; drawn uniformly in `[0.2, 0.8]` when absent.
    #[serde(default)]
    pub centers: Option<Vec<f64>>,
    #[serde(default = "default_noise")]
    pub feature_noise: f64,
    pub specialized_accuracy: f64,
    pub complementary_accuracy: f64,
    #[serde(default = "default_correlation")]
    pub error_correlation: f64,
    #[serde(default = "default_bias")]
    pub specialty_bias: f64,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_noise() -> f64 {
    0.1
}
fn default_correlation() -> f64 {
    0.6
}
fn default_bias() -> f64 {
    0.8
}
fn default_confidence() -> f64 {
    0.6
}
fn default_jitter() -> f64 {
    0.02
}

impl SyntheticTaskSpec {
    /// Defaults for everything except the class count, accuracy profile, and sizes.
    pub fn new(
        classes: usize,
        dim: usize,
        specialized_accuracy: f64,
        complementary_accuracy: f64,
        sizes: (usize, usize, usize),
        seed: u64,
    ) -> Self {
        Self {
            classes,
            dim,
            centers: None,
            feature_noise: default_noise(),
            specialized_accuracy,
            complementary_accuracy,
            error_correlation: default_correlation(),
            specialty_bias: default_bias(),
            confidence: default_confidence(),
            jitter: default_jitter(),
            train_size: sizes.0,
            valid_size: sizes.1,
            test_size: sizes.2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim == 0 {
            return Err(contract!("synthetic task needs c ≥ 2 and d ≥ 1"));
        }
        let (ps, pc) = (self.specialized_accuracy, self.complementary_accuracy);
        if !(0.0 < pc && pc <= ps && ps <= 1.0) {
            return Err(contract!("accuracies must satisfy 0 < p_c ≤ p_s ≤ 1, got p_s={ps}, p_c={pc}"));
        }
        if !(0.0..=1.0).contains(&self.error_correlation) || !(0.0..=1.0).contains(&self.specialty_bias) {
            return Err(contract!("error_correlation and specialty_bias must lie in [0, 1]"));
        }
        let floor = (1.0 - self.confidence) / (self.classes - 1) as f64;
        if !(self.confidence < 1.0 && self.confidence > floor + self.jitter) || self.jitter < 0.0 {
            return Err(contract!(
                "confidence {} must exceed the residual mass {floor} plus jitter {}",
                self.confidence,
                self.jitter
            ));
        }
        if self.feature_noise.is_nan() || self.feature_noise < 0.0 {
            return Err(contract!("feature noise must be ≥ 0"));
        }
        if let Some(c) = &self.centers {
            if c.len() != self.classes * self.dim {
                return Err(contract!("centers need {} values", self.classes * self.dim));
            }
        }
        if self.train_size == 0 || self.test_size == 0 {
            return Err(contract!("train and test splits must be non-empty"));
        }
        Ok(())
    }

    fn resolved_centers(&self) -> Vec<f64> {
        self.centers.clone().unwrap_or_else(|| {
            let mut rng = rng::substream(self.seed, "synthetic-centers", 0);
            (0..self.classes * self.dim)
                .map(|_| rng.random_range(0.2..0.8))
                .collect()
        })
    }
}

/// Agent whose prediction is a deterministic function of the input features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleAgent {
    pub agent_id: u64,
    pub specialty: Vec<usize>,
    pub classes: usize,
    pub dim: usize,
    pub centers: Vec<f64>,
    pub specialized_accuracy: f64,
    pub complementary_accuracy: f64,
    pub error_correlation: f64,
    pub specialty_bias: f64,
    pub confidence: f64,
    pub jitter: f64,
    pub task_seed: u64,
}

/// Nearest center, lowest index on ties.
pub fn nearest_center(centers: &[f64], dim: usize, x: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.chunks_exact(dim).enumerate() {
        let d: f64 = center.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

fn feature_hash(x: &[f64], seed: u64) -> u64 {
    x.iter()
        .fold(rng::mix(seed), |h, v| rng::mix(h ^ v.to_bits()))
}

impl OracleAgent {
    /// Softmax-like column for one feature row.
    pub fn predict_row(&self, x: &[f64]) -> Vec<f64> {
        let c = self.classes;
        let truth = nearest_center(&self.centers, self.dim, x);
        let seed = feature_hash(x, self.task_seed);

        let mut shared = ChaCha8Rng::seed_from_u64(seed);
        let difficulty: f64 = shared.random();
        let mut own = ChaCha8Rng::seed_from_u64(seed);
        own.set_stream(self.agent_id + 1);
        let use_shared = own.random::<f64>() < self.error_correlation;
        let private: f64 = own.random();
        let draw = if use_shared { difficulty } else { private };

        let p = if self.specialty.contains(&truth) {
            self.specialized_accuracy
        } else {
            self.complementary_accuracy
        };
        let predicted = if draw < p {
            truth
        } else {
            let own_classes: Vec<usize> = self
                .specialty
                .iter()
                .copied()
                .filter(|&s| s != truth)
                .collect();
            if !own_classes.is_empty() && own.random::<f64>() < self.specialty_bias {
                own_classes[own.random_range(0..own_classes.len())]
            } else {
                let pick = own.random_range(0..c - 1);
                if pick >= truth {
                    pick + 1
                } else {
                    pick
                }
            }
        };

        let floor = (1.0 - self.confidence) / (c - 1) as f64;
        let mut column = vec![floor; c];
        column[predicted] = self.confidence;
        for v in &mut column {
            *v += self.jitter * own.random::<f64>();
        }
        let total: f64 = column.iter().sum();
        column.iter_mut().for_each(|v| *v /= total);
        column
    }
}

/// Generated splits plus the oracle ensemble, singles first, then pairs.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    pub agents: Vec<AgentModel>,
}

fn sample_split(
    spec: &SyntheticTaskSpec,
    centers: &[f64],
    size: usize,
    split: Split,
    stream: u64,
) -> Result<Dataset> {
    let mut rng = rng::substream(spec.seed, rng::DATA, stream);
    let d = spec.dim;
    let mut features = Vec::with_capacity(size * d);
    let mut labels = Vec::with_capacity(size);
    let mut row = vec![0.0; d];
    for _ in 0..size {
        let class = rng.random_range(0..spec.classes);
        let center = &centers[class * d..(class + 1) * d];
        // Resample until the nearest center agrees with the drawn class so
        // labels stay balanced and consistent with the oracle agents.
        for attempt in 0.. {
            for (r, &m) in row.iter_mut().zip(center) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *r = (m + spec.feature_noise * z).clamp(0.0, 1.0);
            }
            if nearest_center(centers, d, &row) == class || attempt >= 1000 {
                break;
            }
        }
        labels.push(nearest_center(centers, d, &row));
        features.extend_from_slice(&row);
    }
    Dataset::new(features, labels, d, spec.classes, split)
}

pub fn generate_synthetic_task(spec: &SyntheticTaskSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let centers = spec.resolved_centers();
    let train = sample_split(spec, &centers, spec.train_size, Split::Train, 0)?;
    let valid = sample_split(spec, &centers, spec.valid_size, Split::Valid, 1)?;
    let test = sample_split(spec, &centers, spec.test_size, Split::Test, 2)?;

    let agents = enumerate_specializations(spec.classes)?
        .into_iter()
        .enumerate()
        .map(|(id, specialty)| {
            let oracle = OracleAgent {
                agent_id: id as u64,
                specialty: specialty.clone(),
                classes: spec.classes,
                dim: spec.dim,
                centers: centers.clone(),
                specialized_accuracy: spec.specialized_accuracy,
                complementary_accuracy: spec.complementary_accuracy,
                error_correlation: spec.error_correlation,
                specialty_bias: spec.specialty_bias,
                confidence: spec.confidence,
                jitter: spec.jitter,
                task_seed: spec.seed,
            };
            let mut agent = AgentModel {
                id,
                specialty,
                kind: AgentKind::Oracle(oracle),
                train_stats: AgentStats::default(),
            };
            agent.train_stats = AgentStats::measure(&agent, &test)?;
            Ok(agent)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SyntheticTask {
        train,
        valid,
        test,
        agents,
    })
}
