//! `partseg`: prepare datasets, optimize part embeddings, segment images,
//! evaluate and run ablation grids.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use partseg_core::Error;

/// Exit code for usage and configuration problems.
pub const EXIT_USAGE: u8 = 2;
/// Exit code for numerical failures such as diverging losses.
pub const EXIT_NUMERICAL: u8 = 3;
/// Exit code for checkpoint/backbone mismatches.
pub const EXIT_COMPATIBILITY: u8 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "partseg",
    version,
    about = "One-shot part segmentation from diffusion attention maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    PascalCar,
    PascalHorse,
    Celeba,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Crop, filter and relabel a raw dataset into image/mask pairs.
    Prepare {
        #[arg(long, value_enum)]
        dataset: DatasetKind,
        #[arg(long)]
        raw: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Part-name mapping TOML replacing the bundled one (PASCAL only).
        #[arg(long)]
        mapping: Option<PathBuf>,
        /// Divide box overlap by the union instead of the candidate's area.
        #[arg(long)]
        union_overlap: bool,
        /// Also write train/val/test splits with this many training samples.
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write generated two-region samples (for demos and smoke tests).
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Optimize class embeddings on annotated samples.
    Optimize {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Checkpoint path; manifest and loss csv are written beside it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Segment every image in a directory.
    Segment {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write colour overlays.
        #[arg(long)]
        overlay: bool,
        /// Overrides the configuration stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on a labelled test directory.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Inference noise seeds, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Row label in the result tables.
        #[arg(long, default_value = "partseg")]
        method: String,
    },
    /// Optimize and evaluate once per point of a parameter grid.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// TOML file mapping dotted config keys to lists of values.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Divergence { .. } => EXIT_NUMERICAL,
                Error::Compatibility { .. } => EXIT_COMPATIBILITY,
                _ => EXIT_USAGE,
            };
        }
    }
    EXIT_USAGE
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare {
            dataset,
            raw,
            out,
            mapping,
            union_overlap,
            shots,
            seed,
        } => commands::prepare(
            dataset,
            &raw,
            &out,
            mapping.as_deref(),
            union_overlap,
            shots,
            seed,
        ),
        Command::MakeSynthetic {
            out,
            count,
            size,
            seed,
        } => commands::make_synthetic(&out, count, size, seed),
        Command::Optimize {
            config,
            train,
            val,
            out,
            epochs,
            seed,
        } => commands::optimize(
            config.as_deref(),
            &train,
            val.as_deref(),
            &out,
            epochs,
            seed,
        ),
        Command::Segment {
            ckpt,
            images,
            out,
            overlay,
            config,
            seed,
        } => commands::segment(&ckpt, &images, &out, overlay, config.as_deref(), seed),
        Command::Evaluate {
            ckpt,
            test,
            seeds,
            out,
            config,
            method,
        } => commands::evaluate(&ckpt, &test, &seeds, &out, config.as_deref(), &method),
        Command::Ablate {
            config,
            grid,
            out,
            train,
            test,
        } => commands::ablate(
            config.as_deref(),
            &grid,
            &out,
            train.as_deref(),
            test.as_deref(),
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
