//! Batch entry point for the control laboratory: configure, run, and export
//! solves, flows, simulations, and the verification suite.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{exit_code, CmdError};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "pgflow", about = "Policy-gradient flow laboratory for torus control problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config and the PGFLOW_OUT variable).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker-thread cap; defaults to the available cores.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the value and density equations for a fixed control.
    Solve(CommonArgs),
    /// Run the policy-gradient flow and export its trace.
    Flow(CommonArgs),
    /// Sample trajectories and estimate the cost by Monte Carlo.
    Simulate(CommonArgs),
    /// Run the acceptance criteria and print the verdict table.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
        /// List the criteria without running them.
        #[arg(long)]
        list: bool,
    },
}

fn load(common: &CommonArgs) -> Result<RunConfig, CmdError> {
    let cfg = RunConfig::load(
        &common.config,
        common.out.clone(),
        common.seed,
        common.threads,
    )?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CmdError::Config(format!("threads: {e}")))?;
    }
    Ok(cfg)
}

fn dispatch() -> Result<i32, CmdError> {
    match Cli::parse().command {
        Command::Solve(c) => commands::cmd_solve(&load(&c)?),
        Command::Flow(c) => commands::cmd_flow(&load(&c)?),
        Command::Simulate(c) => commands::cmd_simulate(&load(&c)?),
        Command::Verify { common, list } => commands::cmd_verify(&load(&common)?, list),
    }
}

fn main() -> ExitCode {
    ExitCode::from(exit_code(dispatch()) as u8)
}
