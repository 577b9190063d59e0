use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mtuda::cli;

/// Desk-scale multi-target domain adaptation experiments for semantic
/// segmentation.
#[derive(Parser)]
#[command(name = "mtuda", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write every configured domain's dataset to disk
    Generate {
        /// Experiment config file
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the configured method, checkpointing periodically
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint (config hash must match)
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the target validation splits
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Extra domains to evaluate by direct transfer
        #[arg(long)]
        transfer: Vec<String>,
        /// Machine-readable report to show signed deltas against
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Fail (exit nonzero) unless mIoU-Avg reaches this value
        #[arg(long)]
        assert_miou: Option<f64>,
    },
    /// One pseudo-label refinement round on a checkpoint
    Refine {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Render a machine-readable report as a table
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
}

fn run() -> mtuda::Result<()> {
    match Cli::parse().command {
        Command::Generate { config } => cli::cmd_generate(&config),
        Command::Train { config, resume } => cli::cmd_train(&config, resume.as_deref()),
        Command::Eval { config, checkpoint, transfer, baseline, assert_miou } => {
            cli::cmd_eval(&config, &checkpoint, &transfer, baseline.as_deref(), assert_miou)
        }
        Command::Refine { config, checkpoint } => cli::cmd_refine(&config, &checkpoint),
        Command::Report { input, baseline } => cli::cmd_report(&input, baseline.as_deref()),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
