use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use neuvec::Error;

mod commands;
mod settings;

use settings::{RunArgs, Settings};

/// Neural Vecchia Gaussian process experiments.
#[derive(Parser, Debug)]
#[command(name = "neuvec", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write simulated training groups as CSV.
    Simulate(RunArgs),
    /// Train a NeuVec model on simulated or ingested data.
    Train(RunArgs),
    /// Score predictors and write a report table.
    Evaluate(RunArgs),
    /// Fit a Matérn-1.5 kernel by Vecchia likelihood.
    FitKernel(RunArgs),
    /// Turn an observation CSV into a normalized, split dataset.
    Ingest(RunArgs),
    /// Build per-year conditioning sets for a dataset.
    Plan(RunArgs),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NotPositiveDefinite { .. }
        | Error::NonFiniteLoss { .. }
        | Error::ZeroDistance { .. }
        | Error::InsufficientNeighbors { .. } => 2,
        Error::Io(_)
        | Error::Parse { .. }
        | Error::MissingColumn(_)
        | Error::Checkpoint(_)
        | Error::CheckpointVersion { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let (args, run): (RunArgs, fn(&Settings) -> neuvec::Result<()>) = match cli.command {
        Command::Simulate(a) => (a, commands::simulate),
        Command::Train(a) => (a, commands::train),
        Command::Evaluate(a) => (a, commands::evaluate),
        Command::FitKernel(a) => (a, commands::fit_kernel),
        Command::Ingest(a) => (a, commands::ingest),
        Command::Plan(a) => (a, commands::plan),
    };
    match Settings::load(args).and_then(|s| run(&s)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
