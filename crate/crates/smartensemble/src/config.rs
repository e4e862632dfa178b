//! Experiment configuration files: parsing, documented defaults, and validation.
//!
//! Every omitted field is filled before validation; the written echo
//! (`config.json`) is always fully explicit.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use smartensemble_core::data::specialization_count;
use smartensemble_core::knapsack::{
    default_epsilon, default_samples, GradScaling, KnapsackConfig, NormalizationOrder,
};
use smartensemble_core::nn::OptimizerKind;
use smartensemble_core::training::{DatasetSource, ExperimentConfig, SpecializationMode, TrainSettings};

use crate::error::{Error, Result};
use crate::io;

pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_PATIENCE: usize = 10;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_AGENT_EPOCHS: usize = 2;
pub const DEFAULT_SELECTOR_EPOCHS: usize = 40;
pub const DEFAULT_SPECIALTY_FRACTION: f64 = 0.732;
pub const DEFAULT_AGENT_TRAIN_SIZE: usize = 200;
pub const DEFAULT_HIDDEN: [usize; 2] = [128, 64];
pub const DEFAULT_OUTPUT_DIR: &str = "runs/default";

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    optimizer: Option<OptimizerKind>,
    learning_rate: Option<f64>,
    patience: Option<usize>,
}

impl RawTrain {
    fn resolve(self, default_epochs: usize) -> TrainSettings {
        TrainSettings {
            epochs: self.epochs.unwrap_or(default_epochs),
            batch_size: self.batch_size.unwrap_or(DEFAULT_BATCH_SIZE),
            optimizer: self.optimizer.unwrap_or(OptimizerKind::Adam),
            learning_rate: self.learning_rate.unwrap_or(DEFAULT_LEARNING_RATE),
            patience: self.patience.unwrap_or(DEFAULT_PATIENCE),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawKnapsack {
    k: Option<usize>,
    epsilon: Option<f64>,
    samples: Option<usize>,
    grad_scaling: Option<GradScaling>,
    order: Option<NormalizationOrder>,
    noise_seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    dataset: DatasetSource,
    classes: Option<usize>,
    features: Option<usize>,
    agents: Option<usize>,
    #[serde(default)]
    specialization: SpecializationMode,
    specialty_fraction: Option<f64>,
    agent_train_size: Option<usize>,
    agent_hidden: Option<Vec<usize>>,
    #[serde(default)]
    agent_training: RawTrain,
    selector_hidden: Option<Vec<usize>>,
    #[serde(default)]
    selector_training: RawTrain,
    #[serde(default)]
    knapsack: RawKnapsack,
    k_values: Option<Vec<usize>>,
    seed: Option<u64>,
    output_dir: Option<String>,
}

/// Scalar overrides from the command line; they win over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

fn invariant(path: &Path, pointer: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_path_buf(),
        pointer: pointer.to_string(),
        message: message.into(),
    }
}

/// Reads, defaults and validates a configuration file.
pub fn load_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(path, &text, overrides)
}

/// Like [`load_config`] for in-memory text; `path` is only used in messages.
pub fn parse_config(path: &Path, text: &str, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut value: serde_json::Value = io::parse_json(path, text)?;
    // A synthetic task without its own seed follows the root seed.
    let root_seed = overrides
        .seed
        .or_else(|| value.get("seed").and_then(serde_json::Value::as_u64))
        .unwrap_or(0);
    if let Some(dataset) = value.get_mut("dataset").and_then(|d| d.as_object_mut()) {
        let synthetic = dataset.get("kind").and_then(|k| k.as_str()) == Some("synthetic");
        if synthetic && (!dataset.contains_key("seed") || overrides.seed.is_some()) {
            dataset.insert("seed".into(), root_seed.into());
        }
    }
    let mut raw: RawConfig = io::from_value(path, value)?;
    if let DatasetSource::Idx {
        images,
        labels,
        test_images,
        test_labels,
        ..
    } = &mut raw.dataset
    {
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [Some(images), Some(labels), test_images.as_mut(), test_labels.as_mut()]
            .into_iter()
            .flatten()
        {
            *p = base.join(&*p).to_string_lossy().into_owned();
        }
    }
    resolve(path, raw, overrides)
}

fn resolve(path: &Path, raw: RawConfig, overrides: &Overrides) -> Result<ExperimentConfig> {
    let (classes, features) = match &raw.dataset {
        DatasetSource::Synthetic(spec) => (
            raw.classes.unwrap_or(spec.classes),
            raw.features.unwrap_or(spec.dim),
        ),
        DatasetSource::Idx { keep_classes, .. } => {
            let classes = raw
                .classes
                .or_else(|| keep_classes.as_ref().map(Vec::len))
                .ok_or_else(|| invariant(path, "/classes", "missing field `classes` (required for idx datasets without keep_classes)"))?;
            let features = raw
                .features
                .ok_or_else(|| invariant(path, "/features", "missing field `features` (required for idx datasets)"))?;
            (classes, features)
        }
    };
    let agents = raw.agents.unwrap_or_else(|| specialization_count(classes));
    let agent_hidden = raw.agent_hidden.unwrap_or_else(|| DEFAULT_HIDDEN.to_vec());
    let selector_hidden = raw.selector_hidden.unwrap_or_else(|| agent_hidden.clone());
    let knapsack = KnapsackConfig {
        k: overrides.k.or(raw.knapsack.k).unwrap_or(classes.min(agents)),
        epsilon: raw.knapsack.epsilon.unwrap_or_else(default_epsilon),
        samples: raw.knapsack.samples.unwrap_or_else(default_samples),
        grad_scaling: raw.knapsack.grad_scaling.unwrap_or_default(),
        order: raw.knapsack.order.unwrap_or_default(),
        noise_seed: raw.knapsack.noise_seed.unwrap_or(0),
    };
    let k_values = match (overrides.k, raw.k_values) {
        (Some(k), _) => vec![k],
        (None, Some(ks)) => ks,
        (None, None) => (1..=agents).collect(),
    };
    let output_dir = overrides
        .out
        .as_ref()
        .map(|p| p.to_string_lossy().into_owned())
        .or(raw.output_dir)
        .unwrap_or_else(|| DEFAULT_OUTPUT_DIR.to_string());

    let config = ExperimentConfig {
        dataset: raw.dataset,
        classes,
        features,
        agents,
        specialization: raw.specialization,
        specialty_fraction: raw.specialty_fraction.unwrap_or(DEFAULT_SPECIALTY_FRACTION),
        agent_train_size: raw.agent_train_size.unwrap_or(DEFAULT_AGENT_TRAIN_SIZE),
        agent_hidden,
        agent_training: raw.agent_training.resolve(DEFAULT_AGENT_EPOCHS),
        selector_hidden,
        selector_training: raw.selector_training.resolve(DEFAULT_SELECTOR_EPOCHS),
        knapsack,
        k_values,
        seed: overrides.seed.or(raw.seed).unwrap_or(0),
        output_dir,
    };
    validate(path, &config)?;
    Ok(config)
}

/// Cross-field checks, reported against the field they concern.
pub fn validate(path: &Path, config: &ExperimentConfig) -> Result<()> {
    let n = config.agents;
    let k = config.knapsack.k;
    if k == 0 || k > n {
        return Err(invariant(
            path,
            "/knapsack/k",
            format!("k = {k} violates 1 ≤ k ≤ n = {n}"),
        ));
    }
    if let Some((i, &bad)) = config
        .k_values
        .iter()
        .enumerate()
        .find(|(_, &k)| k == 0 || k > n)
    {
        return Err(invariant(
            path,
            &format!("/k_values/{i}"),
            format!("k = {bad} violates 1 ≤ k ≤ n = {n}"),
        ));
    }
    if config.specialization == SpecializationMode::SinglesAndPairs
        && n != specialization_count(config.classes)
    {
        return Err(invariant(
            path,
            "/agents",
            format!(
                "singles-and-pairs requires n = c + C(c,2) = {}, got n = {n}",
                specialization_count(config.classes)
            ),
        ));
    }
    config.validate().map_err(|e| invariant(path, "/", e.to_string()))
}
