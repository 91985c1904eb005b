//! `scch`: generate synthetic AU data, train and evaluate SCC heatmap
//! regressors, run gradient checks, ablations and dumps.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use scch_core::Error;

#[derive(Parser)]
#[command(name = "scch", version, about = "SCC heatmap regression toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n_train: usize,
        #[arg(long, default_value_t = 500)]
        n_test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// AU roster file; the built-in six-AU roster when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long)]
        force: bool,
    },
    /// Train a model and write its checkpoint and loss curve.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// key=value model and training settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the `seed` key of the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = ScopeArg::Ops)]
        scope: ScopeArg,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "gradcheck")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train and evaluate every cell of an ablation grid.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Export weights, heatmaps, channel responses or channel graphs.
    Dump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        what: DumpWhat,
        /// PGM input image (required except for `weights`).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value = "dump")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Ops,
    Model,
    All,
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum DumpWhat {
    Heatmaps,
    Weights,
    Responses,
    Graph,
}

/// Process exit status for an error.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::Diverged { .. } | Error::Metric(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate {
            out,
            n_train,
            n_test,
            seed,
            spec,
            image_size,
            force,
        } => commands::generate(&out, n_train, n_test, seed, spec.as_deref(), image_size, force),
        Command::Train {
            data,
            config,
            out,
            seed,
            force,
        } => commands::train(&data, config.as_deref(), &out, seed, force),
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
            force,
        } => {
            let split = match split {
                SplitArg::Train => scch_core::synth::Split::Train,
                SplitArg::Test => scch_core::synth::Split::Test,
            };
            commands::eval(&checkpoint, &data, split, &out, force)
        }
        Command::Gradcheck {
            scope,
            tol,
            seed,
            out,
            force,
        } => {
            let scope = match scope {
                ScopeArg::Ops => scch_core::gradcheck::Scope::Ops,
                ScopeArg::Model => scch_core::gradcheck::Scope::Model,
                ScopeArg::All => scch_core::gradcheck::Scope::All,
            };
            commands::gradcheck(scope, tol, seed, &out, force)
        }
        Command::Ablate {
            data,
            grid,
            out,
            force,
        } => commands::ablate(&data, &grid, &out, force),
        Command::Dump {
            checkpoint,
            what,
            input,
            out,
            force,
        } => commands::dump(&checkpoint, what, input.as_deref(), &out, force),
    };
    match result {
        Ok(commands::Outcome::Success) => ExitCode::SUCCESS,
        Ok(commands::Outcome::CheckFailed) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
