//! Command-line front end. Every subcommand reads one TOML config, writes CSV
//! files plus `summary.txt` into a fresh output directory, and is a pure
//! function of the config and seed.
//!
//! Exit codes: 0 success, 1 i/o failure, 2 config error or existing output
//! directory, 3 contract or reconciliation failure, 4 divergence.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{CliError, CliResult, Run};
pub use config::{ConfigError, ExperimentConfig};

#[derive(Debug, Parser)]
#[command(name = "corgi2", version, about = "Two-phase partial shuffling experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum CommandKind {
    /// Synthesize the dataset and write it as a block store.
    Gen,
    /// Run the offline phase of the configured strategy.
    Shuffle,
    /// Train each configured strategy and report convergence rates.
    Train,
    /// Monte Carlo blockwise variance after the offline shuffle.
    Stats,
    /// Uniformity metrics of each strategy's first-epoch order.
    Uniformity,
    /// Reconcile measured query counts with the closed-form predictions.
    Complexity,
}

#[derive(Debug, clap::Args)]
pub struct CommonArgs {
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Overrides the config trial count.
    #[arg(long, value_name = "K")]
    pub trials: Option<usize>,
    /// Output directory; must not exist unless --force is given.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    Gen(CommonArgs),
    Shuffle(CommonArgs),
    Train(CommonArgs),
    Stats(CommonArgs),
    Uniformity(CommonArgs),
    Complexity(CommonArgs),
}

impl Command {
    fn split(&self) -> (CommandKind, &CommonArgs) {
        match self {
            Command::Gen(a) => (CommandKind::Gen, a),
            Command::Shuffle(a) => (CommandKind::Shuffle, a),
            Command::Train(a) => (CommandKind::Train, a),
            Command::Stats(a) => (CommandKind::Stats, a),
            Command::Uniformity(a) => (CommandKind::Uniformity, a),
            Command::Complexity(a) => (CommandKind::Complexity, a),
        }
    }
}

/// Loads the config, applies overrides, prepares the output directory and
/// dispatches.
pub fn execute(command: &Command) -> CliResult<PathBuf> {
    let (kind, args) = command.split();
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(trials) = args.trials {
        config.trials = trials;
    }
    config.validate()?;
    let out = args.out.clone().or_else(|| config.out.clone()).ok_or(ConfigError::Invalid {
        field: "out",
        message: "no output directory (set `out` or pass --out)".into(),
    })?;
    commands::prepare_output_dir(&out, args.force)?;
    let run = Run::new(config, out.clone());
    match kind {
        CommandKind::Gen => commands::cmd_gen(&run),
        CommandKind::Shuffle => commands::cmd_shuffle(&run),
        CommandKind::Train => commands::cmd_train(&run),
        CommandKind::Stats => commands::cmd_stats(&run),
        CommandKind::Uniformity => commands::cmd_uniformity(&run),
        CommandKind::Complexity => commands::cmd_complexity(&run),
    }?;
    Ok(out)
}

/// Runs the parsed command line and returns the process exit code.
pub fn main_with(cli: &Cli) -> i32 {
    match execute(&cli.command) {
        Ok(out) => {
            println!("wrote {}", out.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
