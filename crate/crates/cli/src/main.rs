//! `bridgesim`: sampling, conditioning, oracle checks and convergence studies
//! for the stochastic heat equation and its bridges.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 on numerical failures.

mod commands;
mod config;
mod error;
mod schema;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Run;
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "bridgesim", version, about = "Exact sampling and discretization of SPDE bridges")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration file; all keys optional, unknown keys rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path, overriding `output.path`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads. Affects wall time only, never results.
    #[arg(long)]
    threads: Option<usize>,
    /// Validate the configuration without computing.
    #[arg(long)]
    dry_run: bool,
    /// Print the JSON Schema of this command's report and exit.
    #[arg(long)]
    schema: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample the spectral Galerkin solution started at `initial.x`.
    SampleForward(Common),
    /// Sample the bridge conditioned on `initial.y` observed with noise `qtilde`.
    SampleBridge(Common),
    /// Sample the finite element bridge on a uniform mesh of width `fem.h`.
    SampleFemBridge(Common),
    /// Error of the spectral truncation against `N` (exact curve or Monte Carlo).
    ConvergeSpectral(Common),
    /// Monte Carlo error of the finite element method against the mesh width.
    ConvergeFem(Common),
    /// Compare the closed forms with dense conditioning and quadrature.
    OracleCheck(Common),
    /// Print the regularity budget of the configured model.
    CheckAssumptions(Common),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SampleForward(_) => "sample-forward",
            Command::SampleBridge(_) => "sample-bridge",
            Command::SampleFemBridge(_) => "sample-fem-bridge",
            Command::ConvergeSpectral(_) => "converge-spectral",
            Command::ConvergeFem(_) => "converge-fem",
            Command::OracleCheck(_) => "oracle-check",
            Command::CheckAssumptions(_) => "check-assumptions",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::SampleForward(c)
            | Command::SampleBridge(c)
            | Command::SampleFemBridge(c)
            | Command::ConvergeSpectral(c)
            | Command::ConvergeFem(c)
            | Command::OracleCheck(c)
            | Command::CheckAssumptions(c) => c,
        }
    }
}

fn execute(command: &Command) -> Result<(), CliError> {
    let common = command.common();
    if common.schema {
        println!("{}", serde_json::to_string_pretty(&schema::for_command(command)).expect("schema serializes"));
        return Ok(());
    }
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    config.check_command(command.name())?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let out = common.out.clone().or_else(|| config.output.path.clone());
    let run = Run { config, out, dry_run: common.dry_run };
    match command {
        Command::SampleForward(_) => commands::sample_forward_cmd(&run),
        Command::SampleBridge(_) => commands::sample_bridge_cmd(&run),
        Command::SampleFemBridge(_) => commands::sample_fem_bridge_cmd(&run),
        Command::ConvergeSpectral(_) => commands::converge_spectral_cmd(&run),
        Command::ConvergeFem(_) => commands::converge_fem_cmd(&run),
        Command::OracleCheck(_) => commands::oracle_check_cmd(&run),
        Command::CheckAssumptions(_) => commands::check_assumptions_cmd(&run),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bridgesim: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
