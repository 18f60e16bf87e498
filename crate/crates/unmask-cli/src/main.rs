//! Command-line driver: config-file-driven experiments with flag
//! overrides, reproducible artifacts, and run metadata.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "unmask", version, about = "Robust-feature-alignment detection and defense")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory override (same as --output.dir=...).
    #[arg(long)]
    out: Option<String>,
    /// Worker cap override (same as --output.jobs=N).
    #[arg(long)]
    jobs: Option<usize>,
    /// Config overrides of the form --section.key=value.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/val/test synthetic datasets.
    GenData(RunArgs),
    /// Train the unprotected classifier.
    Train(RunArgs),
    /// Train the multi-label feature extractor.
    TrainExtractor(RunArgs),
    /// Attack the test set against the trained classifier.
    Attack(RunArgs),
    /// Adversarially train the hardened classifier.
    AdvTrain(RunArgs),
    /// Line-search the adversarial-training budget.
    SweepEpsilon(RunArgs),
    /// Detection ROC over benign vs successfully attacked samples.
    Detect(RunArgs),
    /// Defense accuracy on an attacked test set.
    Defend(RunArgs),
    /// Run the full defense × attack-vector × class-set grid.
    Grid(RunArgs),
    /// Re-emit report files from a saved report.json.
    Report(RunArgs),
}

/// Usage problems exit 2; runtime failures exit 1.
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args) = match &cli.command {
        Command::GenData(a) => ("gen-data", a),
        Command::Train(a) => ("train", a),
        Command::TrainExtractor(a) => ("train-extractor", a),
        Command::Attack(a) => ("attack", a),
        Command::AdvTrain(a) => ("adv-train", a),
        Command::SweepEpsilon(a) => ("sweep-epsilon", a),
        Command::Detect(a) => ("detect", a),
        Command::Defend(a) => ("defend", a),
        Command::Grid(a) => ("grid", a),
        Command::Report(a) => ("report", a),
    };
    match commands::run(name, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(error)) => {
            eprintln!("error: {error:#}");
            ExitCode::from(1)
        }
    }
}
