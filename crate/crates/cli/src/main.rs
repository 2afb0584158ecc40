//! `plab`: generate datasets, train, sweep seeds, simulate logit dynamics
//! and check ratio-preservation properties.
//!
//! Exit status: 0 on success, 1 when a verdict fails (`check`, or `sweep`
//! with `--min-rate`), 2 on usage, configuration or I/O errors.

mod commands;
mod config;
mod output;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Outcome;

#[derive(Parser)]
#[command(name = "plab", version, about = "Partial-label loss laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as JSON lines.
    Gen(commands::gen::GenArgs),
    /// Train one model and write its history and final metrics.
    Train(commands::train::TrainArgs),
    /// Train one model per seed and report how often the optimal output wins.
    Sweep(commands::sweep::SweepArgs),
    /// Iterate gradient steps directly on the logits.
    Dynamics(commands::dynamics::DynamicsArgs),
    /// Measure ratio-preservation residuals of a built-in loss.
    Check(commands::check::CheckArgs),
    /// Write a noise matrix and its expected distractor counts.
    NoiseMatrix(commands::noise::NoiseArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen::run(a),
        Command::Train(a) => commands::train::run(a),
        Command::Sweep(a) => commands::sweep::run(a),
        Command::Dynamics(a) => commands::dynamics::run(a),
        Command::Check(a) => commands::check::run(a),
        Command::NoiseMatrix(a) => commands::noise::run(a),
    };
    match result {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::VerdictFail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
