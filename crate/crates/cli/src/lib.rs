//! Command-line driver: one subcommand per pipeline stage, all reading the
//! same run configuration.

pub mod config;
pub mod pipeline;
pub mod review;
pub mod workspace;

use std::io::{BufRead, Write};
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::{ConfigInvalid, RunConfig};
use pipeline::{EvalOptions, Outcome, Pipeline};
use workspace::{DependencyMissing, Locked};

#[derive(Debug, Parser)]
#[command(name = "thoughtlog", version, about = "Build reasoning-enhanced training data for log analysis")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, short, global = true, default_value = "thoughtlog.toml")]
    pub config: PathBuf,
    /// Answer model calls from a scripted responder instead of the network.
    #[arg(long, global = true, value_name = "PATH")]
    pub mock_script: Option<PathBuf>,
    /// Rerun the stage even if its inputs are unchanged.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and filter handbook cases.
    Ingest,
    /// Ask the teacher for rationales on task samples.
    Rationales,
    /// Pick a diverse subset of cases.
    Select,
    /// Distill selected cases into thought templates.
    Distill,
    /// Approve, edit or reject distilled templates.
    Review {
        /// Apply decisions from a JSONL file instead of prompting.
        #[arg(long)]
        decisions: Option<PathBuf>,
    },
    /// Sample student trajectories and split them by correctness.
    Generate,
    /// Have the teacher correct erroneous trajectories.
    Calibrate,
    /// Write SFT and DPO datasets with manifests.
    Emit,
    /// Score an endpoint on the configured evaluation sets.
    Eval {
        /// Only this task (ad, lsm, pfp, rca).
        #[arg(long)]
        task: Option<String>,
        /// Must be 0; present so that other values are refused explicitly.
        #[arg(long)]
        temperature: Option<f64>,
        /// Endpoint to evaluate instead of the configured one.
        #[arg(long)]
        endpoint: Option<String>,
    },
    /// Summarise emitted datasets.
    Stats,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Rationales => "rationales",
            Command::Select => "select",
            Command::Distill => "distill",
            Command::Review { .. } => "review",
            Command::Generate => "generate",
            Command::Calibrate => "calibrate",
            Command::Emit => "emit",
            Command::Eval { .. } => "eval",
            Command::Stats => "stats",
        }
    }
}

pub fn execute(cli: &Cli, input: &mut dyn BufRead, output: &mut dyn Write) -> anyhow::Result<Outcome> {
    let cfg = RunConfig::load(&cli.config)?;
    if let Command::Eval { temperature: Some(t), .. } = &cli.command {
        config::check_eval_temperature(*t)?;
    }
    let p = Pipeline::open(cfg, cli.mock_script.as_deref(), cli.force)?;
    let outcome = match &cli.command {
        Command::Ingest => p.ingest(),
        Command::Rationales => p.rationales(),
        Command::Select => p.select(),
        Command::Distill => p.distill(),
        Command::Review { decisions } => p.review(decisions.as_deref(), input, output),
        Command::Generate => p.generate(),
        Command::Calibrate => p.calibrate(),
        Command::Emit => p.emit(),
        Command::Eval { task, temperature, endpoint } => {
            p.eval(&EvalOptions { task: task.clone(), temperature: *temperature, endpoint: endpoint.clone() })
        }
        Command::Stats => p.stats(),
    };
    output.write_all(p.take_messages().as_bytes())?;
    output.flush()?;
    outcome
}

/// Error kind and exit status for a failure.
pub fn classify(err: &anyhow::Error) -> (&'static str, i32) {
    if err.downcast_ref::<ConfigInvalid>().is_some() {
        ("config_invalid", 2)
    } else if err.downcast_ref::<DependencyMissing>().is_some() {
        ("dependency_missing", 1)
    } else if err.downcast_ref::<Locked>().is_some() {
        ("locked", 1)
    } else {
        ("stage_failed", 1)
    }
}

pub fn error_json(stage: &str, err: &anyhow::Error) -> serde_json::Value {
    let (kind, _) = classify(err);
    serde_json::json!({"error": {"kind": kind, "stage": stage, "message": format!("{err:#}")}})
}

/// Runs one command and reports failures as a JSON object on stderr.
/// Returns the process exit status.
pub fn run(cli: &Cli) -> i32 {
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout();
    match execute(cli, &mut stdin.lock(), &mut stdout) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("{}", error_json(cli.command.name(), &e));
            classify(&e).1
        }
    }
}
