//! The `seqrep` command-line tool: data generation, pretraining, recogniser
//! training, feature extraction, evaluation and self-verification.
//!
//! Exit codes: 0 on success, 1 for invalid input (bad flags, config keys,
//! paths or shapes), 2 for numerical failure (divergence, non-finite values,
//! or a failed verification check).

use std::fmt;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod verify;

pub use config::RunConfig;

/// Why a command failed, mapped onto the exit code.
#[derive(Debug)]
pub enum Failure {
    Invalid(String),
    Numerical(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Numerical(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Invalid(m) => write!(f, "error: {m}"),
            Failure::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<seqrep::Error> for Failure {
    fn from(e: seqrep::Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Invalid(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Invalid(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "seqrep", version, about = "Sequence representation learning on synthetic data")]
pub struct Cli {
    /// Print the effective configuration (defaults plus `--config`) and exit.
    #[arg(long)]
    pub print_config: bool,

    /// Configuration read by `--print-config`.
    #[arg(long, requires = "print_config")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the `[pretrain]` model without supervision.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the `[model]` model, optionally on top of a pretrained checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Fine-tune from this checkpoint if it holds a compatible encoder,
        /// otherwise use it as a frozen feature extractor.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Add an identity-initialised linear input layer.
        #[arg(long)]
        lin: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a checkpoint's features for every utterance as a dataset.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to `eval.metric` from the config.
        #[arg(long, value_enum)]
        metric: Option<config::Metric>,
        /// CSV destination; defaults to `eval.csv` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in numerical checks.
    Verify {
        #[arg(long, value_enum, default_value = "all")]
        suite: verify::Suite,
    },
}

/// Runs one parsed invocation, writing user-facing output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), Failure> {
    if cli.print_config {
        let cfg = RunConfig::load(cli.config.as_deref())?;
        write!(out, "{}", cfg.to_toml())?;
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Failure::Invalid("no command given; see `seqrep --help`".into()));
    };
    match command {
        Command::GenData { config, out: dir } => {
            let cfg = RunConfig::load(config.as_deref())?;
            for p in commands::gen_data(&cfg, &dir)? {
                writeln!(out, "wrote {}", p.display())?;
            }
        }
        Command::Pretrain { config, data, out: dir } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let s = commands::pretrain(&cfg, &data, &dir)?;
            writeln!(out, "{}", serde_json::to_string(&s).expect("summary serialises"))?;
        }
        Command::Train {
            config,
            data,
            init,
            lin,
            out: dir,
        } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let s = commands::train(&cfg, &data, init.as_deref(), lin, &dir)?;
            writeln!(out, "{}", serde_json::to_string(&s).expect("summary serialises"))?;
        }
        Command::Extract { checkpoint, data, out: dir } => {
            let p = commands::extract(&checkpoint, &data, &dir)?;
            writeln!(out, "wrote {}", p.display())?;
        }
        Command::Eval {
            config,
            checkpoint,
            data,
            metric,
            out: csv,
        } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let metric = metric.unwrap_or(cfg.eval.metric);
            let csv = csv.unwrap_or_else(|| checkpoint.with_file_name("eval.csv"));
            let report = commands::eval(&checkpoint, &data, metric, &csv)?;
            writeln!(out, "{}", serde_json::to_string(&report).expect("report serialises"))?;
        }
        Command::Verify { suite } => {
            let checks = verify::run_suite(suite);
            let mut failed = 0;
            for c in &checks {
                writeln!(out, "{} {:<48} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)?;
                failed += usize::from(!c.passed);
            }
            writeln!(out, "{} checks, {failed} failed", checks.len())?;
            if failed > 0 {
                return Err(Failure::Numerical(format!("{failed} verification checks failed")));
            }
        }
    }
    Ok(())
}
