//! `report.json`, `sweep.csv`, and the plain-text agent profile table.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use smartensemble_core::ensemble::AgentModel;
use smartensemble_core::training::{ExperimentConfig, RunReport, SweepEntry};

use crate::error::Result;
use crate::io;

pub const REPORT_VERSION: u32 = 1;
pub const SWEEP_HEADER: [&str; 7] = ["k", "e2e_mel", "ua", "mv", "rs", "seed", "wallclock_s"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRow {
    pub id: usize,
    pub specialty: Vec<usize>,
    pub specialized: f64,
    pub complementary: f64,
    pub overall: f64,
}

impl AgentRow {
    pub fn from_agent(agent: &AgentModel) -> Self {
        Self {
            id: agent.id,
            specialty: agent.specialty.clone(),
            specialized: agent.train_stats.specialized,
            complementary: agent.train_stats.complementary,
            overall: agent.train_stats.overall,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KFailure {
    pub k: usize,
    pub error: String,
}

/// Everything known about one output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub version: u32,
    pub config: ExperimentConfig,
    pub agents: Vec<AgentRow>,
    pub runs: Vec<RunReport>,
    pub failures: Vec<KFailure>,
}

impl ExperimentReport {
    pub fn new(config: &ExperimentConfig) -> Self {
        Self {
            version: REPORT_VERSION,
            config: config.clone(),
            agents: Vec::new(),
            runs: Vec::new(),
            failures: Vec::new(),
        }
    }

    /// The report in `dir`, or a fresh one when it is absent or was
    /// produced under a different configuration. Configurations that differ
    /// only in the requested `k` share a report.
    pub fn load_or_new(dir: &Path, config: &ExperimentConfig) -> Self {
        match io::read_json::<ExperimentReport>(&dir.join("report.json")) {
            Ok(mut r) if same_experiment(&r.config, config) => {
                r.config = config.clone();
                r
            }
            _ => Self::new(config),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::write_json(&dir.join("report.json"), self)
    }

    pub fn set_agents(&mut self, agents: &[AgentModel]) {
        self.agents = agents.iter().map(AgentRow::from_agent).collect();
    }

    /// Replaces any earlier result for the same `k`.
    pub fn record_run(&mut self, run: RunReport) {
        self.failures.retain(|f| f.k != run.k);
        self.runs.retain(|r| r.k != run.k);
        self.runs.push(run);
        self.runs.sort_by_key(|r| r.k);
    }

    pub fn record_failure(&mut self, k: usize, error: String) {
        self.runs.retain(|r| r.k != k);
        self.failures.retain(|f| f.k != k);
        self.failures.push(KFailure { k, error });
    }

    pub fn record_sweep(&mut self, entries: &[SweepEntry]) {
        for e in entries {
            match &e.outcome {
                Ok((_, run)) => self.record_run(run.clone()),
                Err(msg) => self.record_failure(e.k, msg.clone()),
            }
        }
    }
}

fn same_experiment(a: &ExperimentConfig, b: &ExperimentConfig) -> bool {
    let strip = |c: &ExperimentConfig| {
        let mut c = c.clone();
        c.knapsack.k = 1;
        c.k_values.clear();
        c
    };
    strip(a) == strip(b)
}

/// CSV with one row per requested `k`, in request order. A failed `k`
/// keeps its row with empty accuracy fields.
pub fn sweep_csv(entries: &[SweepEntry], seed: u64) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SWEEP_HEADER)?;
    for e in entries {
        let row: Vec<String> = match &e.outcome {
            Ok((_, r)) => vec![
                r.k.to_string(),
                r.test.e2e_mel.to_string(),
                r.test.ua.to_string(),
                r.test.mv.to_string(),
                r.test.rs.to_string(),
                r.seed.to_string(),
                r.wallclock_s.to_string(),
            ],
            Err(_) => vec![
                e.k.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                seed.to_string(),
                String::new(),
            ],
        };
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Specialized / complementary / overall accuracy per agent, then the mean.
pub fn agent_table(rows: &[AgentRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>5}  {:<9}  {:>11}  {:>13}  {:>7}",
        "agent", "specialty", "specialized", "complementary", "overall"
    );
    for r in rows {
        let specialty = r
            .specialty
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(
            out,
            "{:>5}  {:<9}  {:>11.2}  {:>13.2}  {:>7.2}",
            r.id, specialty, r.specialized, r.complementary, r.overall
        );
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        let mean = |f: fn(&AgentRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let _ = writeln!(
            out,
            "{:>5}  {:<9}  {:>11.2}  {:>13.2}  {:>7.2}",
            "mean",
            "",
            mean(|r| r.specialized),
            mean(|r| r.complementary),
            mean(|r| r.overall)
        );
    }
    out
}

/// Test accuracy per method and `k`, one line per run.
pub fn run_table(runs: &[RunReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>4}  {:>8}  {:>8}  {:>8}  {:>8}  {:>10}",
        "k", "e2e-mel", "ua", "mv", "rs", "best_epoch"
    );
    for r in runs {
        let _ = writeln!(
            out,
            "{:>4}  {:>8.2}  {:>8.2}  {:>8.2}  {:>8.2}  {:>10}",
            r.k, r.test.e2e_mel, r.test.ua, r.test.mv, r.test.rs, r.best_epoch
        );
    }
    out
}
