//! Versioned JSON checkpoints for agents and selectors.
//!
//! Weight matrices are written as `fan_in` rows of `fan_out` values. Floats
//! use the shortest round-trip decimal form, so save/load is value-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};
use smartensemble_core::autodiff::Tensor;
use smartensemble_core::data::synthetic::OracleAgent;
use smartensemble_core::ensemble::{AgentKind, AgentModel, AgentStats};
use smartensemble_core::knapsack::KnapsackConfig;
use smartensemble_core::nn::{Layer, MlpSpec, ParamSet};
use smartensemble_core::training::Selector;

use crate::error::{Error, Result};
use crate::io;

pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDoc {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

/// Identity and measured profile of an ensemble member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentMeta {
    pub id: usize,
    pub specialty: Vec<usize>,
    pub train_stats: AgentStats,
}

/// `{"version":1,"spec":..,"params":[{"w":..,"b":..}],"seed":..}` plus
/// optional agent or knapsack metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub spec: MlpSpec,
    pub params: Vec<LayerDoc>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent: Option<AgentMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knapsack: Option<KnapsackConfig>,
}

/// Synthetic agents have no weights; their generator parameters are stored instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleDoc {
    pub version: u32,
    pub oracle: OracleAgent,
    pub agent: AgentMeta,
}

fn bad(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

impl Checkpoint {
    pub fn new(spec: &MlpSpec, params: &ParamSet, seed: u64) -> Self {
        let params = params
            .layers
            .iter()
            .map(|l| LayerDoc {
                w: l.w.data().chunks(l.w.shape()[1]).map(<[f64]>::to_vec).collect(),
                b: l.b.data().to_vec(),
            })
            .collect();
        Self {
            version: VERSION,
            spec: spec.clone(),
            params,
            seed,
            agent: None,
            knapsack: None,
        }
    }

    /// Rebuilds the parameter tensors, checking them against `spec`.
    pub fn param_set(&self, path: &Path) -> Result<ParamSet> {
        if self.version != VERSION {
            return Err(bad(path, format!("unsupported version {}", self.version)));
        }
        self.spec.validate()?;
        let layers = self
            .params
            .iter()
            .enumerate()
            .map(|(i, doc)| {
                let fan_out = doc.b.len();
                if doc.w.iter().any(|row| row.len() != fan_out) {
                    return Err(bad(path, format!("params/{i}/w rows must have {fan_out} entries")));
                }
                let w = Tensor::new(vec![doc.w.len(), fan_out], doc.w.concat())
                    .map_err(|e| bad(path, format!("params/{i}/w: {e}")))?;
                let b = Tensor::new(vec![fan_out], doc.b.clone())
                    .map_err(|e| bad(path, format!("params/{i}/b: {e}")))?;
                Ok(Layer { w, b })
            })
            .collect::<Result<Vec<_>>>()?;
        let params = ParamSet { layers };
        if !params.matches(&self.spec) {
            return Err(bad(path, format!("params do not match layer sizes {:?}", self.spec.layer_sizes)));
        }
        if !params.all_finite() {
            return Err(bad(path, "params contain non-finite values"));
        }
        Ok(params)
    }
}

pub fn save_agent(path: &Path, agent: &AgentModel, seed: u64) -> Result<()> {
    let meta = AgentMeta {
        id: agent.id,
        specialty: agent.specialty.clone(),
        train_stats: agent.train_stats,
    };
    match &agent.kind {
        AgentKind::Mlp { spec, params } => {
            let mut doc = Checkpoint::new(spec, params, seed);
            doc.agent = Some(meta);
            io::write_json(path, &doc)
        }
        AgentKind::Oracle(oracle) => io::write_json(
            path,
            &OracleDoc {
                version: VERSION,
                oracle: oracle.clone(),
                agent: meta,
            },
        ),
    }
}

pub fn load_agent(path: &Path) -> Result<AgentModel> {
    let value: serde_json::Value = io::read_json(path)?;
    if value.get("oracle").is_some() {
        let doc: OracleDoc = io::from_value(path, value)?;
        if doc.version != VERSION {
            return Err(bad(path, format!("unsupported version {}", doc.version)));
        }
        return Ok(AgentModel {
            id: doc.agent.id,
            specialty: doc.agent.specialty,
            kind: AgentKind::Oracle(doc.oracle),
            train_stats: doc.agent.train_stats,
        });
    }
    let doc: Checkpoint = io::from_value(path, value)?;
    let params = doc.param_set(path)?;
    let meta = doc
        .agent
        .ok_or_else(|| bad(path, "missing agent metadata"))?;
    Ok(AgentModel {
        id: meta.id,
        specialty: meta.specialty,
        kind: AgentKind::Mlp {
            spec: doc.spec,
            params,
        },
        train_stats: meta.train_stats,
    })
}

/// File name of agent `id` inside `agents/`.
pub fn agent_file_name(id: usize) -> String {
    format!("agent_{id:03}.json")
}

/// Saves every agent under `dir` as `agent_NNN.json`.
pub fn save_agents(dir: &Path, agents: &[AgentModel], seed: u64) -> Result<()> {
    for agent in agents {
        save_agent(&dir.join(agent_file_name(agent.id)), agent, seed)?;
    }
    Ok(())
}

/// Loads `agent_*.json` from `dir`, ordered by agent id.
pub fn load_agents(dir: &Path) -> Result<Vec<AgentModel>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut agents = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("agent_") && name.ends_with(".json") {
            agents.push(load_agent(&path)?);
        }
    }
    if agents.is_empty() {
        return Err(bad(dir, "no agent checkpoints found"));
    }
    agents.sort_by_key(|a| a.id);
    if agents.iter().enumerate().any(|(i, a)| a.id != i) {
        return Err(bad(dir, "agent ids must be 0..n without gaps"));
    }
    Ok(agents)
}

pub fn save_selector(path: &Path, selector: &Selector, seed: u64) -> Result<()> {
    let mut doc = Checkpoint::new(&selector.spec, &selector.params, seed);
    doc.knapsack = Some(selector.knapsack.clone());
    io::write_json(path, &doc)
}

pub fn load_selector(path: &Path) -> Result<Selector> {
    let doc: Checkpoint = io::read_json(path)?;
    let params = doc.param_set(path)?;
    let knapsack = doc
        .knapsack
        .ok_or_else(|| bad(path, "missing knapsack settings"))?;
    Ok(Selector {
        spec: doc.spec,
        params,
        knapsack,
    })
}

pub fn selector_file_name(k: usize) -> String {
    format!("selector_k{k}.json")
}
