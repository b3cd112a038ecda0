//! Command-line workflow: synth → pretrain → align → finetune → infer → eval.
//!
//! Exit codes: 0 success, 1 domain failure (one-line `error: ...` on stderr),
//! 2 flag/usage errors (from the parser).

mod commands;
mod config;

use clap::{Parser, Subcommand};
use config::RunConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "cdalign", version, about = "Bitemporal alignment and change detection")]
struct Cli {
    /// JSON run configuration; module defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the seed of whichever stage the subcommand runs.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Caps internal parallelism; 1 gives identical outputs to N>1.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate toy scenes and/or a pre-training patch corpus.
    Synth {
        /// Directory receiving scene bundles (scene_000/, scene_001/, ...).
        #[arg(long)]
        scenes_out: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        pairs: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 0.05)]
        change_rate: f64,
        /// Directory receiving pre-training patches (patch_000.png, ...).
        #[arg(long)]
        patches_out: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        patches: usize,
        #[arg(long, default_value_t = 64)]
        patch_size: usize,
    },
    /// Self-supervised encoder + alignment-head pre-training.
    Pretrain {
        #[arg(long)]
        patches: PathBuf,
        #[arg(long)]
        out_encoder: PathBuf,
        #[arg(long)]
        out_head: PathBuf,
        /// CSV of per-epoch mean loss.
        #[arg(long)]
        loss_log: Option<PathBuf>,
        /// Overrides the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Calibrate T2 onto T1 by descriptor matching and RANSAC.
    Align {
        #[arg(long, conflicts_with = "scenes")]
        t1: Option<PathBuf>,
        #[arg(long, conflicts_with = "scenes", requires = "t1")]
        t2: Option<PathBuf>,
        /// Batch mode: calibrate every scene bundle under this directory.
        #[arg(long)]
        scenes: Option<PathBuf>,
        /// Descriptor source: "raw" or "learned".
        #[arg(long, default_value = "raw")]
        descriptors: String,
        #[arg(long, required_if_eq("descriptors", "learned"))]
        encoder: Option<PathBuf>,
        #[arg(long, required_if_eq("descriptors", "learned"))]
        head: Option<PathBuf>,
        /// Calibrated T2 output (single-pair mode).
        #[arg(long)]
        out: Option<PathBuf>,
        /// JSON report path (single-pair mode); batch mode writes
        /// align_report.json into each scene directory.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train the change decoder against a frozen encoder.
    Finetune {
        #[arg(long)]
        scenes: PathBuf,
        /// T2 file name inside each scene directory, e.g. t2_cal.png.
        #[arg(long, default_value = "t2.png")]
        t2_file: String,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        out_decoder: PathBuf,
        #[arg(long)]
        loss_log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Tile, score and stitch a change probability map and binary mask.
    Infer {
        #[arg(long)]
        t1: PathBuf,
        /// Calibrated T2 (same extent as T1).
        #[arg(long)]
        t2: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        decoder: PathBuf,
        #[arg(long)]
        out_prob: Option<PathBuf>,
        #[arg(long)]
        out_mask: PathBuf,
        #[arg(long, default_value_t = 256)]
        tile: usize,
        #[arg(long, default_value_t = 192)]
        stride: usize,
        /// Overrides the configured decision threshold.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Compare a predicted mask against ground truth; prints one CSV row.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Label for the CSV row.
        #[arg(long, default_value = "scene")]
        scenario: String,
        /// Optional validity mask; pixels at 0 are excluded.
        #[arg(long)]
        valid_mask: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();

    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }

    let config = match cli.config.as_deref().map(RunConfig::load).transpose() {
        Ok(c) => c.unwrap_or_default(),
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };

    match commands::run(cli.command, config, cli.seed) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
