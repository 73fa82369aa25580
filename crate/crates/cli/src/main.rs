//! `tunet`: synthesize data, train, register, evaluate and gradient-check.
//!
//! Exit codes: 0 success, 1 failed gradient checks, 2 invalid configuration
//! or input, 3 diverged training, 4 I/O or malformed files.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tunet::Error;

use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "tunet", version, about = "Transformer-UNet deformable 3D registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: GlobalArgs,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run on a single thread.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic atlas pairs with ground-truth fields.
    Synth {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train on a dataset directory, or on synthetic pairs if none is given.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Register a moving image to a fixed image.
    Register {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        moving: Option<PathBuf>,
        #[arg(long)]
        fixed: Option<PathBuf>,
        /// Moving label map, warped with nearest sampling.
        #[arg(long)]
        moving_seg: Option<PathBuf>,
    },
    /// Dice report over a dataset directory.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Finite-difference checks of the analytic gradients.
    Gradcheck {
        /// Replace every tolerance.
        #[arg(long)]
        tolerance: Option<f64>,
        /// Skip the full-model check.
        #[arg(long)]
        skip_model: bool,
        #[arg(long, hide = true)]
        flip_cc_sign: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::DivergedLoss { .. } => 3,
        Error::MissingFile(_)
        | Error::MalformedHeader(_)
        | Error::IoFailure(_)
        | Error::MalformedCheckpoint(_)
        | Error::VersionMismatch { .. }
        | Error::UnsupportedDims(_)
        | Error::InvalidVolume(_)
        | Error::MissingSegmentation => 4,
        _ => 2,
    }
}

fn run(cli: Cli) -> tunet::Result<u8> {
    let g = cli.global;
    let mut flags = Overrides {
        seed: g.seed,
        out: g.out,
        deterministic: g.deterministic,
        ..Overrides::default()
    };
    let name = match &cli.command {
        Command::Synth { count } => {
            flags.count = *count;
            "synth"
        }
        Command::Train { dataset, steps } => {
            flags.dataset = dataset.clone();
            flags.steps = *steps;
            "train"
        }
        Command::Register { checkpoint, moving, fixed, moving_seg } => {
            flags.checkpoint = checkpoint.clone();
            flags.moving = moving.clone();
            flags.fixed = fixed.clone();
            flags.moving_seg = moving_seg.clone();
            "register"
        }
        Command::Evaluate { checkpoint, dataset } => {
            flags.checkpoint = checkpoint.clone();
            flags.dataset = dataset.clone();
            "evaluate"
        }
        Command::Gradcheck { tolerance, skip_model, flip_cc_sign } => {
            flags.tolerance = *tolerance;
            flags.skip_model = *skip_model;
            flags.flip_cc_sign = *flip_cc_sign;
            "gradcheck"
        }
    };
    let path = g.config.as_deref();
    let cfg = RunConfig::resolve(path, &flags)?;
    let work = || -> tunet::Result<u8> {
        match name {
            "synth" => commands::synth(&cfg, path).map(|_| 0),
            "train" => commands::train(&cfg, path).map(|_| 0),
            "register" => commands::register(&cfg, path).map(|_| 0),
            "evaluate" => commands::evaluate(&cfg, path).map(|_| 0),
            _ => commands::gradcheck(&cfg, path).map(|failed| u8::from(failed > 0)),
        }
    };
    if cfg.deterministic {
        tunet::par::single_threaded(work)
    } else {
        work()
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
