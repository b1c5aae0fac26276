//! `lowrank`: profile, allocate and factor the weight matrices of a model
//! container.

mod commands;
mod config;
mod error;
mod output;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{RunArgs, RunConfig};
use error::CliResult;

#[derive(Parser, Debug)]
#[command(
    name = "lowrank",
    version,
    about = "Tolerance-driven low-rank weight compression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-layer error/parameter tables and the envelope of their curves.
    Profile(RunArgs),
    /// Ranks from a tolerance, per-group tolerances or a compression target.
    Allocate(RunArgs),
    /// Allocate, then factor every layer and write the factors and report.
    Compress(RunArgs),
    /// Parameter/loss frontier over a grid of uniform tolerances.
    Sweep(RunArgs),
    /// Check the first-order loss bound on a seeded toy network.
    VerifyBound(RunArgs),
    /// Write a seeded synthetic model and calibration set.
    GenSynthetic(RunArgs),
}

fn run(cli: Cli) -> CliResult<()> {
    let (args, f): (&RunArgs, fn(&RunConfig) -> CliResult<()>) = match &cli.command {
        Command::Profile(a) => (a, commands::cmd_profile),
        Command::Allocate(a) => (a, commands::cmd_allocate),
        Command::Compress(a) => (a, commands::cmd_compress),
        Command::Sweep(a) => (a, commands::cmd_sweep),
        Command::VerifyBound(a) => (a, commands::cmd_verify_bound),
        Command::GenSynthetic(a) => (a, commands::cmd_gen_synthetic),
    };
    f(&RunConfig::resolve(args)?)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
