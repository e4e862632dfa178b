//! Dataset preparation and the train / sweep orchestration behind the CLI.

use std::path::Path;
use std::time::Instant;

use smartensemble_core::data::synthetic::generate_synthetic_task;
use smartensemble_core::data::{Dataset, Split};
use smartensemble_core::ensemble::AgentModel;
use smartensemble_core::training::{self, DatasetSource, ExperimentConfig, Splits, SweepEntry};

use crate::error::{Error, Result};
use crate::io;

/// Splits of the configured dataset; synthetic tasks also yield their oracle agents.
pub struct Prepared {
    pub splits: Splits,
    pub oracle_agents: Option<Vec<AgentModel>>,
}

fn restrict(data: Dataset, keep: Option<&[usize]>) -> Result<Dataset> {
    Ok(match keep {
        Some(keep) => data.keep_classes(keep)?,
        None => data,
    })
}

fn check_shape(config: &ExperimentConfig, data: &Dataset, what: &str) -> Result<()> {
    if data.dim() != config.features || data.classes() != config.classes {
        return Err(Error::Usage(format!(
            "{what} has d={}, c={} but the config says features={}, classes={}",
            data.dim(),
            data.classes(),
            config.features,
            config.classes
        )));
    }
    Ok(())
}

/// Loads or generates the train / valid / test splits.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    match &config.dataset {
        DatasetSource::Synthetic(spec) => {
            let task = generate_synthetic_task(spec)?;
            Ok(Prepared {
                splits: Splits {
                    train: task.train,
                    valid: task.valid,
                    test: task.test,
                },
                oracle_agents: Some(task.agents),
            })
        }
        DatasetSource::Idx {
            images,
            labels,
            test_images,
            test_labels,
            keep_classes,
            valid_size,
            test_size,
        } => {
            let keep = keep_classes.as_deref();
            let mut all = restrict(io::load_idx(images.as_ref(), labels.as_ref(), Split::Train)?, keep)?;
            if keep.is_none() && all.classes() < config.classes {
                // Labels may not reach the top class in a small file.
                all = Dataset::new(
                    all.features().to_vec(),
                    all.labels().to_vec(),
                    all.dim(),
                    config.classes,
                    Split::Train,
                )?;
            }
            check_shape(config, &all, "the image file")?;
            let splits = match (test_images, test_labels) {
                (Some(ti), Some(tl)) => {
                    let test = restrict(io::load_idx(ti.as_ref(), tl.as_ref(), Split::Test)?, keep)?;
                    let mut splits = Splits::partition(&all, None, *valid_size, 0, config.seed)?;
                    splits.test = Dataset::new(
                        test.features().to_vec(),
                        test.labels().to_vec(),
                        test.dim(),
                        config.classes,
                        Split::Test,
                    )?;
                    splits
                }
                _ => Splits::partition(&all, None, *valid_size, test_size.unwrap_or(0), config.seed)?,
            };
            check_shape(config, &splits.test, "the test split")?;
            Ok(Prepared {
                splits,
                oracle_agents: None,
            })
        }
    }
}

/// Oracle agents for synthetic tasks, trained MLP agents otherwise.
pub fn build_agents(config: &ExperimentConfig, prepared: &Prepared) -> Result<Vec<AgentModel>> {
    match &prepared.oracle_agents {
        Some(agents) => Ok(agents.clone()),
        None => Ok(training::train_agents(
            config,
            &prepared.splits.train,
            Some(&prepared.splits.test),
        )?),
    }
}

/// Seconds since process-local start, for wall-clock columns.
pub fn wall_clock() -> impl FnMut() -> f64 {
    let start = Instant::now();
    move || start.elapsed().as_secs_f64()
}

/// Full sweep over `config.k_values` with a wall clock.
pub fn sweep(config: &ExperimentConfig, splits: &Splits, agents: &[AgentModel]) -> Result<Vec<SweepEntry>> {
    let mut clock = wall_clock();
    Ok(training::sweep_k(config, splits, agents, &mut clock)?)
}

/// Directory holding all artifacts of `config`.
pub fn output_dir(config: &ExperimentConfig) -> &Path {
    Path::new(&config.output_dir)
}
