//! `seqanomaly`: train, score and evaluate sequence anomaly detectors.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 training
//! divergence, 5 I/O error.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::Experiment;
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "seqanomaly", version, about = "Anomaly detection on variable-length sequences")]
struct Cli {
    /// Suppress progress and summary messages.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load or generate data, normalize, split, train and evaluate.
    Run {
        /// Experiment TOML file.
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's top-level seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; overrides the config's `out`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score sequences with a saved model, writing `id,score,label_pred`.
    Score {
        /// model.json written by `run`.
        model: PathBuf,
        /// JSONL or CSV sequences.
        data: PathBuf,
        /// Output CSV; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic JSONL dataset from a generator TOML file.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output JSONL; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the ROC curve from a scores CSV with `score` and `label`
    /// columns.
    Roc {
        scores: PathBuf,
        /// Output CSV; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn execute(cli: Cli) -> Result<()> {
    let quiet = cli.quiet;
    let note = |msg: &str| {
        if !quiet {
            eprintln!("{msg}");
        }
    };
    match cli.command {
        Command::Run { config, seed, out } => {
            let exp = Experiment::load(&config, seed)?;
            let out_dir = match (out, &exp.out) {
                (Some(dir), _) => dir,
                (None, Some(dir)) if dir.is_absolute() => dir.clone(),
                (None, Some(dir)) => exp.base_dir.join(dir),
                (None, None) => {
                    return Err(CliError::Config(
                        "no output directory: pass --out or set `out` in the config".into(),
                    ))
                }
            };
            let report = commands::run(&exp, &out_dir, note)?;
            if !quiet {
                println!("test AUC {:.4}; artifacts in {}", report.auc, report.out_dir.display());
            }
        }
        Command::Score { model, data, out } => {
            let n = commands::score(&model, &data, out.as_deref())?;
            if out.is_some() {
                note(&format!("scored {n} sequences"));
            }
        }
        Command::Synth { config, seed, out } => {
            let n = commands::synth(&config, seed, out.as_deref())?;
            if out.is_some() {
                note(&format!("wrote {n} sequences"));
            }
        }
        Command::Roc { scores, out } => {
            let auc = commands::roc(&scores, out.as_deref())?;
            note(&format!("AUC {auc:.4}"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
