//! `smartensemble <subcommand> --config <path> [--k INT] [--method STR] [--seed INT] [--out DIR]`

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use smartensemble_core::ensemble::AgentModel;
use smartensemble_core::training::{self, ExperimentConfig, Method};

use crate::checkpoint;
use crate::config::{load_config, Overrides};
use crate::error::{Error, Result};
use crate::io;
use crate::pipeline::{self, output_dir, Prepared};
use crate::report::{agent_table, run_table, sweep_csv, ExperimentReport};

#[derive(Debug, Parser)]
#[command(name = "smartensemble", version, about = "Per-input sub-ensemble selection through a differentiable top-k layer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Sub-ensemble size; overrides `knapsack.k` and restricts sweeps to this k.
    #[arg(long)]
    k: Option<usize>,
    /// Root seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic task's splits as CSV.
    GenSynthetic(Common),
    /// Train (or, for synthetic tasks, materialize) the specialized agents.
    TrainAgents(Common),
    /// Train the selection network for one k.
    TrainSelector(Common),
    /// Test accuracy of one consensus rule.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// One of e2e-mel, ua, mv, rs.
        #[arg(long)]
        method: String,
    },
    /// Train and score one selector per configured k.
    SweepK(Common),
    /// Print the agent profile and per-k results of an output directory.
    Report(Common),
}

/// Runs the CLI and returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let overrides = Overrides {
        k: common.k,
        seed: common.seed,
        out: common.out.clone(),
    };
    load_config(&common.config, &overrides)
}

/// Loads the config and writes its echo before anything else happens.
fn start(common: &Common) -> Result<ExperimentConfig> {
    let config = load(common)?;
    io::write_json(&output_dir(&config).join("config.json"), &config)?;
    Ok(config)
}

fn agents_dir(config: &ExperimentConfig) -> PathBuf {
    output_dir(config).join("agents")
}

fn load_or_build_agents(config: &ExperimentConfig, prepared: &Prepared) -> Result<Vec<AgentModel>> {
    let dir = agents_dir(config);
    if dir.is_dir() {
        log::info!("using agents from {}", dir.display());
        return checkpoint::load_agents(&dir);
    }
    let agents = pipeline::build_agents(config, prepared)?;
    checkpoint::save_agents(&dir, &agents, config.seed)?;
    Ok(agents)
}

fn print_stdout(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes());
    let _ = out.flush();
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::GenSynthetic(c) => gen_synthetic(&start(&c)?),
        Command::TrainAgents(c) => train_agents(&start(&c)?),
        Command::TrainSelector(c) => train_selector(&start(&c)?),
        Command::Evaluate { common, method } => {
            let method: Method = method.parse().map_err(|e: smartensemble_core::Error| Error::Usage(e.to_string()))?;
            evaluate(&start(&common)?, method)
        }
        Command::SweepK(c) => sweep_k(&start(&c)?),
        Command::Report(c) => report(&load(&c)?),
    }
}

fn write_split_csv(path: &Path, data: &smartensemble_core::data::Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (0..data.dim()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for i in 0..data.len() {
        let mut row: Vec<String> = data.row(i).iter().map(f64::to_string).collect();
        row.push(data.labels()[i].to_string());
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    io::write_file(path, &bytes)
}

fn gen_synthetic(config: &ExperimentConfig) -> Result<i32> {
    let prepared = pipeline::prepare(config)?;
    if prepared.oracle_agents.is_none() {
        return Err(Error::Usage("gen-synthetic needs a synthetic dataset in the config".into()));
    }
    let dir = output_dir(config).join("data");
    let s = &prepared.splits;
    for (name, data) in [("train", &s.train), ("valid", &s.valid), ("test", &s.test)] {
        write_split_csv(&dir.join(format!("{name}.csv")), data)?;
    }
    print_stdout(&format!(
        "wrote {} / {} / {} samples to {}\n",
        s.train.len(),
        s.valid.len(),
        s.test.len(),
        dir.display()
    ));
    Ok(0)
}

fn train_agents(config: &ExperimentConfig) -> Result<i32> {
    let prepared = pipeline::prepare(config)?;
    let agents = pipeline::build_agents(config, &prepared)?;
    checkpoint::save_agents(&agents_dir(config), &agents, config.seed)?;
    let dir = output_dir(config);
    let mut report = ExperimentReport::load_or_new(dir, config);
    report.set_agents(&agents);
    report.save(dir)?;
    print_stdout(&agent_table(&report.agents));
    Ok(0)
}

fn train_selector(config: &ExperimentConfig) -> Result<i32> {
    let prepared = pipeline::prepare(config)?;
    let agents = load_or_build_agents(config, &prepared)?;
    let k = config.knapsack.k;
    let cache = training::EnsembleCache::new(&agents, &prepared.splits)?;
    let mut clock = pipeline::wall_clock();
    let dir = output_dir(config);
    let mut report = ExperimentReport::load_or_new(dir, config);
    report.set_agents(&agents);
    match training::run_k(config, &prepared.splits, &cache, k, &mut clock) {
        Ok((selector, run)) => {
            checkpoint::save_selector(&dir.join(checkpoint::selector_file_name(k)), &selector, config.seed)?;
            report.record_run(run);
            report.save(dir)?;
            print_stdout(&run_table(&report.runs));
            Ok(0)
        }
        Err(e) => {
            report.record_failure(k, e.to_string());
            report.save(dir)?;
            Err(e.into())
        }
    }
}

fn evaluate(config: &ExperimentConfig, method: Method) -> Result<i32> {
    let prepared = pipeline::prepare(config)?;
    let dir = output_dir(config);
    let agents = checkpoint::load_agents(&agents_dir(config))?;
    let k = config.knapsack.k;
    let selector = match method {
        Method::E2eMel => Some(checkpoint::load_selector(&dir.join(checkpoint::selector_file_name(k)))?),
        _ => None,
    };
    let accuracy = training::evaluate(method, &agents, selector.as_ref(), &prepared.splits.test, k, config.seed)?;
    let line = serde_json::json!({
        "method": method.name(),
        "k": k,
        "seed": config.seed,
        "accuracy": accuracy,
    });
    print_stdout(&format!("{line}\n"));
    Ok(0)
}

fn sweep_k(config: &ExperimentConfig) -> Result<i32> {
    let prepared = pipeline::prepare(config)?;
    let agents = load_or_build_agents(config, &prepared)?;
    let entries = pipeline::sweep(config, &prepared.splits, &agents)?;
    let dir = output_dir(config);
    for e in &entries {
        if let Ok((selector, _)) = &e.outcome {
            checkpoint::save_selector(&dir.join(checkpoint::selector_file_name(e.k)), selector, config.seed)?;
        }
    }
    io::write_file(&dir.join("sweep.csv"), sweep_csv(&entries, config.seed)?.as_bytes())?;
    let mut report = ExperimentReport::load_or_new(dir, config);
    report.set_agents(&agents);
    report.record_sweep(&entries);
    report.save(dir)?;
    print_stdout(&run_table(&report.runs));
    let failed: Vec<String> = report
        .failures
        .iter()
        .map(|f| format!("k={}: {}", f.k, f.error))
        .collect();
    if failed.is_empty() {
        Ok(0)
    } else {
        eprintln!("training aborted for {}", failed.join("; "));
        Ok(2)
    }
}

fn report(config: &ExperimentConfig) -> Result<i32> {
    let dir = output_dir(config);
    let report: ExperimentReport = io::read_json(&dir.join("report.json"))?;
    let mut text = agent_table(&report.agents);
    if !report.runs.is_empty() {
        text.push('\n');
        text.push_str(&run_table(&report.runs));
    }
    for f in &report.failures {
        text.push_str(&format!("k={} failed: {}\n", f.k, f.error));
    }
    print_stdout(&text);
    Ok(0)
}
