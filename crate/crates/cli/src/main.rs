mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "pcjscc",
    version,
    about = "Point-cloud transmission experiments over AWGN channels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Evaluation threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate a synthetic dataset as PLY files plus a manifest.
    GenData,
    /// Train a model and write its checkpoint and loss log.
    Train {
        /// Continue from the trainer checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a trained model over an SNR sweep.
    EvalSweep,
    /// Sweep the digital baseline over SNR.
    Baseline,
    /// Run the latent-head, refinement and hybrid ablations.
    Ablate,
}

pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(config) = cli.config.as_deref() else {
        eprintln!("error: --config is required");
        return ExitCode::from(2);
    };
    let overrides = Overrides {
        seed: cli.seed,
        workers: cli.workers,
    };
    let result = match cli.command {
        Command::GenData => commands::gen_data(config, &cli.out, &overrides),
        Command::Train { resume } => commands::train(config, &cli.out, &overrides, resume),
        Command::EvalSweep => commands::eval_sweep(config, &cli.out, &overrides),
        Command::Baseline => commands::baseline(config, &cli.out, &overrides),
        Command::Ablate => commands::ablate(config, &cli.out, &overrides),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Config(_) => 2,
                CliError::Runtime(_) => 3,
            })
        }
    }
}
