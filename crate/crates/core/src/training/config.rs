use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::synthetic::SyntheticTaskSpec;
use crate::data::specialization_count;
use crate::error::{contract, Result};
use crate::knapsack::KnapsackConfig;
use crate::nn::{MlpSpec, OptimizerKind, OutputMode};

/// Minibatch training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Early-stopping patience in epochs, on validation accuracy.
    pub patience: usize,
}

impl TrainSettings {
    pub fn validate(&self, what: &str) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(contract!("{what}: epochs and batch_size must be ≥ 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(contract!("{what}: learning_rate must be finite and ≥ 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSource {
    /// IDX files. Without dedicated test files the main files are split
    /// three ways; otherwise they are split into train and validation.
    Idx {
        images: String,
        labels: String,
        #[serde(default)]
        test_images: Option<String>,
        #[serde(default)]
        test_labels: Option<String>,
        /// Classes to keep, relabelled `0..len` in this order.
        #[serde(default)]
        keep_classes: Option<Vec<usize>>,
        valid_size: usize,
        #[serde(default)]
        test_size: Option<usize>,
    },
    Synthetic(SyntheticTaskSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpecializationMode {
    /// One agent per class and one per pair of classes.
    #[default]
    SinglesAndPairs,
}

/// A complete, seeded description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    /// Class count `c`.
    pub classes: usize,
    /// Input width `d`.
    pub features: usize,
    /// Ensemble size `n`.
    pub agents: usize,
    pub specialization: SpecializationMode,
    /// Fraction ρ of each agent's training set drawn from its specialty classes.
    pub specialty_fraction: f64,
    pub agent_train_size: usize,
    pub agent_hidden: Vec<usize>,
    pub agent_training: TrainSettings,
    pub selector_hidden: Vec<usize>,
    pub selector_training: TrainSettings,
    pub knapsack: KnapsackConfig,
    pub k_values: Vec<usize>,
    pub seed: u64,
    pub output_dir: String,
}

impl ExperimentConfig {
    pub fn agent_spec(&self) -> MlpSpec {
        let mut sizes = vec![self.features];
        sizes.extend(&self.agent_hidden);
        sizes.push(self.classes);
        MlpSpec {
            layer_sizes: sizes,
            output_mode: OutputMode::Softmax,
        }
    }

    pub fn selector_spec(&self) -> MlpSpec {
        let mut sizes = vec![self.features];
        sizes.extend(&self.selector_hidden);
        sizes.push(self.agents);
        MlpSpec {
            layer_sizes: sizes,
            output_mode: OutputMode::RawScores,
        }
    }

    /// Knapsack settings for sub-ensemble size `k`.
    pub fn knapsack_for(&self, k: usize) -> KnapsackConfig {
        KnapsackConfig {
            k,
            ..self.knapsack.clone()
        }
    }

    /// Checks the cross-field invariants.
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(contract!("classes: need c ≥ 2, got {}", self.classes));
        }
        if self.features == 0 {
            return Err(contract!("features: need d ≥ 1"));
        }
        match self.specialization {
            SpecializationMode::SinglesAndPairs => {
                let expected = specialization_count(self.classes);
                if self.agents != expected {
                    return Err(contract!(
                        "agents: singles-and-pairs needs n = c + C(c,2) = {expected}, got {}",
                        self.agents
                    ));
                }
            }
        }
        self.knapsack
            .validate(self.agents)
            .map_err(|e| contract!("knapsack: {e}"))?;
        if self.k_values.is_empty() {
            return Err(contract!("k_values: at least one k is required"));
        }
        if let Some(&bad) = self.k_values.iter().find(|&&k| k == 0 || k > self.agents) {
            return Err(contract!(
                "k_values: every k must satisfy 1 ≤ k ≤ n = {}, got {bad}",
                self.agents
            ));
        }
        if !(self.specialty_fraction > 0.0 && self.specialty_fraction <= 1.0) {
            return Err(contract!("specialty_fraction: ρ must lie in (0, 1]"));
        }
        if self.agent_train_size == 0 {
            return Err(contract!("agent_train_size must be ≥ 1"));
        }
        self.agent_training.validate("agent_training")?;
        self.selector_training.validate("selector_training")?;
        match &self.dataset {
            DatasetSource::Synthetic(spec) => {
                spec.validate()?;
                if spec.classes != self.classes || spec.dim != self.features {
                    return Err(contract!(
                        "dataset: synthetic task has c={}, d={} but config says c={}, d={}",
                        spec.classes,
                        spec.dim,
                        self.classes,
                        self.features
                    ));
                }
            }
            DatasetSource::Idx {
                test_images,
                test_labels,
                test_size,
                keep_classes,
                ..
            } => {
                if test_images.is_some() != test_labels.is_some() {
                    return Err(contract!("dataset: test_images and test_labels go together"));
                }
                if test_images.is_none() && test_size.is_none() {
                    return Err(contract!("dataset: test_size is required without test files"));
                }
                if let Some(keep) = keep_classes {
                    if keep.len() != self.classes {
                        return Err(contract!(
                            "dataset: keep_classes lists {} classes but classes = {}",
                            keep.len(),
                            self.classes
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}
