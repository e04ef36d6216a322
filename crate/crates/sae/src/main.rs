use clap::{Parser, Subcommand};
use sae::commands::{self, Command};
use sae::config::RunConfig;
use sae::error::{CliError, CliResult};
use std::path::PathBuf;
use std::process::ExitCode;

/// Small area estimation from complex survey data.
#[derive(Debug, Parser)]
#[command(name = "sae", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// JSON run configuration, or the run.json of an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Worker threads for chains and cross-validation refits.
    #[arg(long, global = true, env = "SAE_THREADS")]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Synthetic frame, population and area truth.
    Simulate,
    /// Stratified two-stage cluster sample from a population.
    Sample,
    /// Weighted or binomial direct estimates per area and nationally.
    Direct,
    /// Area-level smoothed direct model.
    Smooth,
    /// Unit-level beta-binomial or Gaussian-process model.
    Unit,
    /// Leave-one-area-out cross-validation.
    Assess,
    /// Rank distributions from posterior or direct draws.
    Rank,
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Validation("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Validation(format!("cannot start thread pool: {e}")))?;
    }
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        config.seed = cli.seed;
    }
    let command = match cli.command {
        Cmd::Simulate => Command::Simulate,
        Cmd::Sample => Command::Sample,
        Cmd::Direct => Command::Direct,
        Cmd::Smooth => Command::Smooth,
        Cmd::Unit => Command::Unit,
        Cmd::Assess => Command::Assess,
        Cmd::Rank => Command::Rank,
    };
    let meta = commands::run(command, &config, &cli.out)?;
    for w in &meta.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
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
