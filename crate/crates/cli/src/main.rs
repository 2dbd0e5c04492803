//! `bgr` — train, evaluate and inspect the thing/stuff graph reasoning
//! pipeline, fuse predictions into panoptic maps, and score them.
//!
//! Exit codes: 0 success, 1 verification failure (failed gradient check or
//! diverged training), 2 usage or configuration error.

mod commands;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use bgr_core::Error;

#[derive(Parser)]
#[command(name = "bgr", version, about = "Bidirectional thing/stuff graph reasoning engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run finite-difference checks over every differentiable op and the
    /// end-to-end pipeline.
    Gradcheck {
        /// Only run ops whose name contains this substring.
        #[arg(long, conflicts_with = "all")]
        filter: Option<String>,
        /// Run the full suite (the default).
        #[arg(long)]
        all: bool,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Append a deliberately corrupted backward pass that must fail;
        /// verifies the checker catches wrong gradients (exits 1).
        #[arg(long)]
        inject_fault: bool,
    },
    /// Generate one toy scene and write its feature map, score map, ground
    /// truth, instances, semantic raster, class table and embeddings.
    Gen {
        /// Run configuration JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scene seed; defaults to the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for the scene artifacts.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the pipeline on toy scenes and write a checkpoint plus a
    /// JSON-lines training log.
    Train {
        /// Run configuration JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the reasoning mode (bidirectional, thing-to-stuff,
        /// stuff-to-thing, disconnected, thing-only, stuff-only, cosine).
        #[arg(long)]
        mode: Option<String>,
        /// Output directory (checkpoint/ and train_log.jsonl); falls back
        /// to the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on freshly generated scenes and report PQ.
    Eval {
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of evaluation scenes (per-scene seeds are seed + index).
        #[arg(long, default_value_t = 20)]
        scenes: usize,
        #[arg(long, default_value_t = 9000)]
        seed: u64,
        /// Embedding file; required for cosine-mode checkpoints.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Write the full-precision PQ report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every reasoning mode with identical seeds and
    /// emit one table row per mode.
    Ablate {
        /// Run configuration JSON; must set embedding_file for the cosine row.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's training seed (shared by every row).
        #[arg(long)]
        seed: Option<u64>,
        /// Evaluation scenes per mode.
        #[arg(long, default_value_t = 20)]
        scenes: usize,
        /// Write the table as JSON here (stdout always gets the text table).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fuse an instances file with a semantic class raster into a panoptic
    /// map.
    Fuse {
        /// Instance predictions JSON.
        #[arg(long)]
        instances: PathBuf,
        /// Per-pixel class raster (BGRM of integer class ids).
        #[arg(long)]
        semantic: PathBuf,
        /// Output panoptic map (.bgrp plus .bgrp.json segment table).
        #[arg(long)]
        out: PathBuf,
        /// Drop instances scoring below this (default 0.5).
        #[arg(long)]
        score_thresh: Option<f64>,
        /// Discard an instance when less than this fraction of its mask is
        /// still unclaimed (default 0.5).
        #[arg(long)]
        keep_frac: Option<f64>,
        /// Stuff segments below this area become void (default: 4096,
        /// scaled to 1% of the image for small rasters).
        #[arg(long)]
        min_stuff_area: Option<u64>,
    },
    /// Panoptic quality of a predicted map against ground truth.
    Pq {
        /// Predicted panoptic map (.bgrp).
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth panoptic map (.bgrp).
        #[arg(long)]
        gt: PathBuf,
        /// Write the full-precision report here; stdout shows 4 decimals.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cosine-similarity raster between one extracted class center and
    /// every pixel.
    Centers {
        /// Feature map (BGRM + sidecar).
        #[arg(long)]
        features: PathBuf,
        /// Coarse score map (BGRM + sidecar).
        #[arg(long)]
        scores: PathBuf,
        /// Class index into the score map.
        #[arg(long = "class")]
        class_id: usize,
        /// Output similarity raster (BGRM, H x W).
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gradcheck {
            filter,
            all: _,
            eps,
            tol,
            seed,
            inject_fault,
        } => commands::gradcheck(filter.as_deref(), eps, tol, seed, inject_fault),
        Command::Gen { config, seed, out } => commands::gen(config.as_deref(), seed, &out),
        Command::Train {
            config,
            seed,
            mode,
            out,
        } => commands::train(config.as_deref(), seed, mode.as_deref(), out.as_deref()),
        Command::Eval {
            checkpoint,
            scenes,
            seed,
            embeddings,
            out,
        } => commands::eval(&checkpoint, scenes, seed, embeddings.as_deref(), out.as_deref()),
        Command::Ablate {
            config,
            seed,
            scenes,
            out,
        } => commands::ablate(config.as_deref(), seed, scenes, out.as_deref()),
        Command::Fuse {
            instances,
            semantic,
            out,
            score_thresh,
            keep_frac,
            min_stuff_area,
        } => commands::fuse(&instances, &semantic, &out, score_thresh, keep_frac, min_stuff_area),
        Command::Pq { pred, gt, out } => commands::pq(&pred, &gt, out.as_deref()),
        Command::Centers {
            features,
            scores,
            class_id,
            out,
        } => commands::centers(&features, &scores, class_id, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Verification(msg)) => {
            eprintln!("verification failure: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(err)) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}

/// Errors split by exit code.
pub enum CliError {
    /// Exit 1: the build is numerically wrong or training diverged.
    Verification(String),
    /// Exit 2: bad arguments, config, or input files.
    Usage(Error),
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        match err {
            Error::Divergence { .. } => CliError::Verification(err.to_string()),
            other => CliError::Usage(other),
        }
    }
}

pub type CliResult = Result<(), CliError>;
