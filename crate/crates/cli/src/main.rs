//! `metamorph`: command-line entry point for training, attack evaluation,
//! split-runtime sessions, privacy accounting and dataset generation.

mod commands;
mod config;
mod images;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use metamorph_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("session ended without completing: {0}")]
    Aborted(String),
    #[error("privacy budget exhausted at ε = {0:.4}")]
    BudgetExhausted(f64),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2: configuration, 3: runtime or protocol, 4: privacy budget.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Core(Error::Config(_) | Error::Calibration(_)) => 2,
            CliError::BudgetExhausted(_) | CliError::Core(Error::BudgetExhausted(_)) => 4,
            _ => 3,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "metamorph", version, about = "Multi-task split learning with private feature producers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Experiment configuration and dotted-path overrides.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// TOML experiment configuration.
    #[arg(short, long)]
    pub config: PathBuf,
    /// Override a configuration field, e.g. `--set dp.clip_threshold=0.5`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the configured regime and write checkpoint, metrics and report.
    Train(ConfigArgs),
    /// Evaluate every (module, head) pair of a checkpoint on the test split.
    EvalInterchange {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train decoders on shared features and try to reconstruct inputs.
    AttackReconstruct {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint whose encoder was trained with differential privacy.
        #[arg(long)]
        private: PathBuf,
        /// Checkpoint of a comparable encoder trained without it.
        #[arg(long)]
        non_private: PathBuf,
        /// Task whose shared features the attacker observes.
        #[arg(long)]
        task: Option<String>,
    },
    /// Run the producer side of a split session (listens).
    Serve {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Instead of a session, time loopback exchanges of these payload sizes.
        #[arg(long, value_delimiter = ',', value_name = "BYTES")]
        loopback_bench: Vec<usize>,
        #[arg(long, default_value_t = 50)]
        rounds: usize,
    },
    /// Run the consumer side of a split session (connects).
    Consume {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Privacy accounting: ε for (q, σ, T, δ), or σ for a target ε.
    Accountant(commands::AccountantArgs),
    /// Write a synthetic dataset as PNG images plus labels.csv.
    GenData(commands::GenDataArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(c) => commands::train(&config::load(&c.config, &c.overrides)?),
        Command::EvalInterchange { cfg, checkpoint } => {
            commands::eval_interchange(&config::load(&cfg.config, &cfg.overrides)?, &checkpoint)
        }
        Command::AttackReconstruct {
            cfg,
            private,
            non_private,
            task,
        } => commands::attack_reconstruct(
            &config::load(&cfg.config, &cfg.overrides)?,
            &private,
            &non_private,
            task.as_deref(),
        ),
        Command::Serve {
            cfg,
            checkpoint,
            loopback_bench,
            rounds,
        } => {
            let c = config::load(&cfg.config, &cfg.overrides)?;
            if loopback_bench.is_empty() {
                commands::serve(&c, checkpoint.as_deref())
            } else {
                commands::loopback_bench(&c, &loopback_bench, rounds)
            }
        }
        Command::Consume { cfg, checkpoint } => {
            commands::consume(&config::load(&cfg.config, &cfg.overrides)?, checkpoint.as_deref())
        }
        Command::Accountant(a) => commands::accountant(&a),
        Command::GenData(a) => commands::gen_data(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
