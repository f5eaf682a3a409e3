//! `elmo`: data generation, training, evaluation, controller design,
//! closed-loop simulation and linearizability checks from TOML configs.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "elmo", version, about = "Exactly linearizable models: identification and constrained control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Clone, Debug)]
pub struct Common {
    /// TOML configuration file; relative paths inside it resolve against its
    /// directory.
    #[arg(short, long)]
    pub config: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(short, long)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an identification experiment and write a dataset.
    GenData(Common),
    /// Fit a model to a dataset.
    Train(Common),
    /// Free-run a model on a recorded experiment and report R².
    Eval(Common),
    /// Steady-state target and LQR gain at one operating point.
    DesignLqr(Common),
    /// Closed-loop simulation of one or more controllers.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Also write a gnuplot script for the traces.
        #[arg(long)]
        plot: bool,
    },
    /// Sampled check of the exact-linearizability conditions.
    CheckLinearizable(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(c) => commands::gen_data(c),
        Command::Train(c) => commands::train(c),
        Command::Eval(c) => commands::eval(c),
        Command::DesignLqr(c) => commands::design_lqr(c),
        Command::Simulate { common, plot } => commands::simulate(common, *plot),
        Command::CheckLinearizable(c) => commands::check_linearizable(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
