//! Command-line front end: configuration, dispatch and output files.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::{Options, Outcome, Overrides};
use crate::config::{Format, RunConfig};
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "egue", version, about = "Transition-strength moments for embedded Gaussian unitary ensembles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Closed-form moments and cumulants.
    Moments,
    /// Compare closed forms with the exact oracle over a grid of models.
    Verify,
    /// Monte Carlo moments, strength histogram and Gaussian overlay.
    Sample,
    /// Closed-form shape parameters along one varying field.
    Sweep,
    /// Exact moments by Wick contraction.
    Oracle,
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct Flags {
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; stdout when absent (except for `sample`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub bins: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    /// Largest sector dimension (oracle default 300, sampling default 4000).
    #[arg(long, global = true)]
    pub max_dim: Option<usize>,
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            RunConfig::from_json_str(&text)
        }
    }
}

/// Runs one command and returns its outcome without writing anything.
pub fn execute(command: Command, cfg: &RunConfig, opts: &Options) -> Result<Outcome> {
    match command {
        Command::Moments => commands::cmd_moments(cfg, opts),
        Command::Verify => commands::cmd_verify(cfg, opts),
        Command::Sample => commands::cmd_sample(cfg, opts),
        Command::Sweep => commands::cmd_sweep(cfg, opts),
        Command::Oracle => commands::cmd_oracle(cfg, opts),
    }
}

/// Full pipeline behind the binary; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match run_inner(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("egue: {e}");
            e.exit_code()
        }
    }
}

fn run_inner(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.flags.config.as_ref())?;
    let overrides = Overrides {
        samples: cli.flags.samples,
        seed: cli.flags.seed,
        bins: cli.flags.bins,
        format: cli.flags.format,
        out: cli.flags.out.clone(),
        max_dim: cli.flags.max_dim,
    };
    let opts = Options::merge(&cfg, &overrides);
    let outcome = execute(cli.command, &cfg, &opts)?;
    let dir = match (&opts.out, cli.command) {
        (Some(d), _) => Some(d.clone()),
        (None, Command::Sample) => Some(PathBuf::from(".")),
        (None, _) => None,
    };
    output::emit(&outcome.artifacts, dir.as_deref())?;
    match outcome.failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
