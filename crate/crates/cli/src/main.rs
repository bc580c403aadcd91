//! `samovar <sandbox|train|eval|collapse> [--config FILE] [key=value ...]`
//!
//! Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 acceptance
//! gate failure.

mod config;
mod fewshot;
mod output;
mod sandbox;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use samovar_core::Error;

use config::{split_pair, Config, KeySpec, SEED_ENV};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numerical(String),
    Gate(String),
    Io(String),
    Internal(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Io(_) | CliError::Internal(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Gate(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Gate(m) => write!(f, "gate failed: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Numerical(m) => CliError::Numerical(m),
            Error::Io(e) => CliError::Io(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "samovar", version, about = "Amortized variational meta-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Conjugate-Gaussian sandbox sweep over sigma_y, objective and L.
    Sandbox(Args),
    /// Episodic few-shot training; list-valued `beta` runs a sweep.
    Train(Args),
    /// Evaluate a checkpoint over a sweep of prediction sample counts.
    Eval(Args),
    /// Matched Monte-Carlo and ELBO runs tracking the largest prior variance.
    Collapse(Args),
    /// Print the keys a command accepts, with defaults.
    Keys {
        #[arg(value_enum)]
        command: Which,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Sandbox,
    Train,
    Eval,
    Collapse,
}

#[derive(clap::Args)]
struct Args {
    /// Flat key=value file; a previous run's manifest.txt replays that run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// key=value overrides, applied after the file.
    #[arg(value_parser = split_pair)]
    pairs: Vec<(String, String)>,
}

fn keys_of(which: Which) -> Vec<KeySpec> {
    match which {
        Which::Sandbox => sandbox::keys(),
        Which::Train => fewshot::train_keys(),
        Which::Eval => fewshot::eval_keys(),
        Which::Collapse => fewshot::collapse_keys(),
    }
}

fn resolve(name: &str, which: Which, args: &Args) -> Result<Config, CliError> {
    Config::resolve(
        name,
        &keys_of(which),
        args.config.as_deref(),
        &args.pairs,
        std::env::var(SEED_ENV).ok(),
    )
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Sandbox(a) => sandbox::run(&resolve("sandbox", Which::Sandbox, &a)?),
        Command::Train(a) => fewshot::train(&resolve("train", Which::Train, &a)?),
        Command::Eval(a) => fewshot::eval(&resolve("eval", Which::Eval, &a)?),
        Command::Collapse(a) => fewshot::collapse(&resolve("collapse", Which::Collapse, &a)?),
        Command::Keys { command } => {
            for (k, d, doc) in keys_of(command) {
                println!("{k}={}  # {doc}", d.unwrap_or("<required>"));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("samovar: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
