//! `condflow`: train, evaluate, sample from and verify conditional flows.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use condflow::config::Precision;
use condflow::verify::Scope;

use condflow_cli::error::CliError;
use condflow_cli::{check, run};

#[derive(Parser)]
#[command(name = "condflow", version, about = "Conditional normalizing flows with exact likelihoods")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a flow; writes the checkpoint, loss trace and resolved config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out test set.
    Eval(CheckpointArgs),
    /// Draw samples at each configured temperature.
    Sample(CheckpointArgs),
    /// Run the verification oracles.
    Check(CheckArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `run.dtype`.
    #[arg(long, value_enum)]
    dtype: Option<DtypeArg>,
    /// Overrides `run.out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<Fault>,
}

#[derive(Args)]
struct CheckpointArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Defaults to `model.ckpt` in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    /// Optional run configuration; only its seed and output directory are used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write `check.csv` here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    scope: ScopeArg,
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<Fault>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Fault {
    /// Poisons a coupling weight with NaN halfway through training.
    Nan,
    /// Feeds the gradient check an objective the tape cannot differentiate.
    WrongGradient,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Layers,
    Gradients,
    Normalization,
    Dequant,
    Metrics,
    All,
}

impl From<ScopeArg> for Scope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::Layers => Scope::Layers,
            ScopeArg::Gradients => Scope::Gradients,
            ScopeArg::Normalization => Scope::Normalization,
            ScopeArg::Dequant => Scope::Dequant,
            ScopeArg::Metrics => Scope::Metrics,
            ScopeArg::All => Scope::All,
        }
    }
}

fn load(args: &RunArgs) -> Result<condflow::config::RunConfig, CliError> {
    run::load_config(
        &args.config,
        args.seed,
        args.dtype.map(|d| match d {
            DtypeArg::F32 => Precision::F32,
            DtypeArg::F64 => Precision::F64,
        }),
        args.out.clone(),
    )
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => {
            if a.inject_fault == Some(Fault::WrongGradient) {
                return Err(CliError::config("train supports --inject-fault nan only"));
            }
            run::train(&load(&a.run)?, a.inject_fault == Some(Fault::Nan))
        }
        Command::Eval(a) => run::eval(&load(&a.run)?, a.checkpoint),
        Command::Sample(a) => run::sample(&load(&a.run)?, a.checkpoint),
        Command::Check(a) => {
            let cfg = match &a.config {
                Some(path) => Some(run::load_config(path, a.seed, None, a.out.clone())?),
                None => None,
            };
            let seed = a.seed.or(cfg.as_ref().map(|c| c.run.seed)).unwrap_or(0);
            let out = a.out.or(cfg.map(|c| c.run.out));
            check::check(a.scope.into(), seed, out, a.inject_fault == Some(Fault::WrongGradient))
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.code)
        }
    }
}
