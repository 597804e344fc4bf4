//! `phantom`: train, verify and cost phantom-parallel and tensor-parallel
//! networks on a simulated rank group.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 verification failure,
//! 3 runtime or training failure.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{CompareArgs, CostmodelArgs, FitCommArgs, GradcheckArgs, VerificationFailed};
use config::{RunArgs, UsageError};

#[derive(Parser, Debug)]
#[command(name = "phantom", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one network and write its manifest, loss history and cost report.
    Train(RunArgs),
    /// Check the distributed phantom gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Tabulate modeled FLOPs, communication time and energy over a grid.
    Costmodel(CostmodelArgs),
    /// Fit communication-cost constants to timing measurements.
    FitComm(FitCommArgs),
    /// Train TP and PP to a shared loss and compare modeled energy.
    Compare(CompareArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use phantom_parallel::Error as E;
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    if err.downcast_ref::<VerificationFailed>().is_some() {
        return 2;
    }
    match err.downcast_ref::<E>() {
        Some(E::Config { .. } | E::Parse { .. } | E::UnknownCollective(_)) => 1,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Train(a) => commands::cmd_train(a),
        Command::Gradcheck(a) => commands::cmd_gradcheck(a),
        Command::Costmodel(a) => commands::cmd_costmodel(a),
        Command::FitComm(a) => commands::cmd_fit_comm(a),
        Command::Compare(a) => commands::cmd_compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
