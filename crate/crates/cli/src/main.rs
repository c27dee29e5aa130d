use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use slam_mhe::harness::{run_comparison, run_experiment, ExperimentConfig, Method, ScenarioSpec};

#[derive(Parser)]
#[command(name = "slam-mhe", version, about = "Moving horizon estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and run one estimator.
    Run(RunArgs),
    /// Run several estimators on identical simulated data.
    Compare(CompareArgs),
    /// Run the acceptance suite.
    Accept,
}

#[derive(Args)]
struct Common {
    /// Preset name (circular, corridor) or path to a scenario JSON file.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for CSV/JSON files.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Landmark-phase worker threads.
    #[arg(long)]
    workers: Option<usize>,
    /// Experiment config JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write timing columns as zero for reproducible output files.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    method: Option<Method>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    /// Methods to compare; the first is the baseline.
    #[arg(long, value_delimiter = ',', default_value = "decoupled,coupled")]
    method: Vec<Method>,
}

fn build_config(common: &Common, method: Option<Method>) -> slam_mhe::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::circular(method.unwrap_or(Method::Decoupled)),
    };
    if let Some(s) = &common.scenario {
        cfg.scenario = ScenarioSpec::parse(s);
    }
    if let Some(m) = method {
        cfg.method = m;
    }
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    if common.out.is_some() {
        cfg.out_dir = common.out.clone();
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if common.no_timing {
        cfg.record_timing = false;
    }
    Ok(cfg)
}

/// Prints a line; a closed stdout (e.g. piped into `head`) is not an error.
fn emit(text: &str) -> io::Result<()> {
    match writeln!(io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        r => r,
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Run(args) => {
            let cfg = build_config(&args.common, args.method)?;
            let out = run_experiment(&cfg).context("run failed")?;
            emit(&serde_json::to_string_pretty(&out.summary)?)?;
            Ok(true)
        }
        Command::Compare(args) => {
            let base = build_config(&args.common, None)?;
            let cfgs: Vec<ExperimentConfig> = args
                .method
                .iter()
                .map(|m| ExperimentConfig {
                    method: *m,
                    ..base.clone()
                })
                .collect();
            let report = run_comparison(&cfgs).context("comparison failed")?;
            emit(&serde_json::to_string_pretty(&report)?)?;
            Ok(true)
        }
        Command::Accept => {
            let results = slam_mhe_acceptance::run_all();
            for r in &results {
                emit(&r.to_string())?;
            }
            let passed = results.iter().filter(|r| r.passed).count();
            emit(&format!("{passed}/{} criteria passed", results.len()))?;
            Ok(passed == results.len())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
