use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod output;

/// Timestamp-supervised localization and grading on synthetic feature sequences.
///
/// Any config key can be overridden with a trailing `--key=value`
/// (values are TOML literals, e.g. `--epochs=5 --lm_dilations=[1,2]`).
#[derive(Parser, Debug)]
#[command(name = "stcnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML config file (defaults to `<out>/config.toml` when present).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train on a dataset and write a checkpoint and per-epoch log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset file (default `<out>/dataset.stcd`).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Checkpoint file (default `<out>/checkpoints/model.ckpt`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run ablation sweeps and write consolidated tables.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Comma-separated sweep keys: consensus, losses, schemes, wpm, baselines.
        #[arg(long, value_delimiter = ',', required = true)]
        sweep: Vec<String>,
    },
    /// Turn an evaluation report into plot-ready CSVs.
    Plotdata {
        #[command(flatten)]
        common: Common,
        /// Report file (default `<out>/reports/eval.json`).
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let (args, overrides) = config::split_overrides(std::env::args().collect())?;
    let cli = Cli::parse_from(args);
    match cli.command {
        Command::Generate { common } => commands::generate(&common, &overrides),
        Command::Train { common, dataset } => commands::train(&common, &overrides, dataset),
        Command::Eval {
            common,
            dataset,
            checkpoint,
        } => commands::eval(&common, &overrides, dataset, checkpoint),
        Command::Ablate {
            common,
            dataset,
            sweep,
        } => commands::ablate(&common, &overrides, dataset, &sweep),
        Command::Plotdata { common, report } => commands::plotdata(&common, &overrides, report),
    }
}
