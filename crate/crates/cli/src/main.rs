//! `fatigue-fusion`: runs the library's protocols from one experiment config.
//!
//! Exit codes: 0 on success, 1 on data, config or validation errors, 2 on usage errors.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::output::Output;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] fatigue_fusion::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("validation failed: {0}")]
    Invalid(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Parser)]
#[command(name = "fatigue-fusion", version, about = "Multi-source sensor imputation and fatigue detection")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; every file is written beneath it.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for independent (scenario, seed) runs.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check every configured dataset against its invariants.
    Validate,
    /// Run the conditioning plan and resample to the common rate.
    Preprocess,
    /// Block split of the target; writes the manifest and both sides.
    Split,
    /// Fit one imputer per source and write the enhanced target.
    Impute,
    /// Split, enhance, and train a detector on the target.
    Train,
    /// Score a saved detector.
    Eval,
    /// Original vs imputed vs noise-corrupted channel comparison.
    NoiseBaseline,
    /// Batch-norm and Jacobian toggle grid over the scenarios.
    Ablate,
    /// Cross-domain augmentation over the scenarios.
    Augment,
    /// Held-out reconstruction error of candidate imputer networks.
    SelectImputer,
    /// Write a synthetic multi-domain corpus.
    Synth,
    /// Mutual information, domain distances, and the added-feature check.
    Diagnose,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Preprocess => "preprocess",
            Command::Split => "split",
            Command::Impute => "impute",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::NoiseBaseline => "noise-baseline",
            Command::Ablate => "ablate",
            Command::Augment => "augment",
            Command::SelectImputer => "select-imputer",
            Command::Synth => "synth",
            Command::Diagnose => "diagnose",
        }
    }
}

fn run(cli: &Cli, config_path: &std::path::Path) -> Result<(), CliError> {
    let loaded = ExperimentConfig::load(config_path)?;
    let mut cfg = loaded.config;
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    let mut out = Output::new(&cli.out, cli.command.name(), loaded.hash, cfg.seeds())?;
    let result = match cli.command {
        Command::Validate => commands::validate(&cfg, &mut out),
        Command::Preprocess => commands::preprocess(&cfg, &mut out),
        Command::Split => commands::split(&cfg, &mut out),
        Command::Impute => commands::impute(&cfg, &mut out),
        Command::Train => commands::train(&cfg, &mut out),
        Command::Eval => commands::eval(&cfg, &mut out),
        Command::NoiseBaseline => commands::noise_baseline(&cfg, &mut out, cli.jobs),
        Command::Ablate => commands::ablate(&cfg, &mut out, cli.jobs),
        Command::Augment => commands::augment(&cfg, &mut out, cli.jobs),
        Command::SelectImputer => commands::select_imputer(&cfg, &mut out, cli.jobs),
        Command::Synth => commands::synth(&cfg, &mut out),
        Command::Diagnose => commands::diagnose(&cfg, &mut out),
    };
    // the manifest is written even when the command fails part-way
    out.finish()?;
    result
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FATIGUE_FUSION_LOG", "warn")).init();
    let cli = Cli::parse();
    let Some(config_path) = cli.config.clone() else {
        Cli::command()
            .error(clap::error::ErrorKind::MissingRequiredArgument, "--config <PATH> is required")
            .exit();
    };
    match run(&cli, &config_path) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
