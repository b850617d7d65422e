use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod config;

use config::Resolution;

/// Polygon matching-loss toolkit: evaluation, fitting and solver inspection.
#[derive(Debug, Parser)]
#[command(name = "polyot", version, about)]
struct Cli {
    /// JSON file with `sinkhorn`, `fit` and `resolution` sections. Flags win
    /// over file values.
    #[arg(long, global = true, env = "POLYOT_CONFIG")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score predicted polygons against references (mIoU, P@0.5, P@0.7).
    Eval {
        /// JSONL samples file.
        samples: PathBuf,
        /// JSONL file of `{"id", "predicted_polygon"}` lines.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Use each reference as its own prediction.
        #[arg(long, conflicts_with = "predictions")]
        self_eval: bool,
        /// Rasterize every sample at this size instead of its own.
        #[arg(long)]
        resolution: Option<Resolution>,
        /// Where to write the JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a polygon to a reference from a seeded noisy start.
    Fit {
        /// JSON array of `[x, y]` vertices in normalized coordinates.
        reference: PathBuf,
        #[arg(long, value_enum, default_value_t = LossKind::Scheduled)]
        loss: LossKind,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        /// Noise added to the reference to form the start.
        #[arg(long)]
        sigma: Option<f64>,
        /// Cyclic shift applied to the start's vertex list.
        #[arg(long, default_value_t = 0)]
        rotate: usize,
        /// Explicit starting polygon; replaces the noisy reference.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        epsilon_rel: Option<f64>,
        /// Per-step JSONL trace.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Per-step CSV trace.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Final polygon as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve one entropic transport problem with uniform marginals.
    Sinkhorn {
        /// JSON array of cost rows.
        cost: PathBuf,
        #[arg(long)]
        epsilon_rel: Option<f64>,
        #[arg(long)]
        max_iterations: Option<usize>,
        /// Write the cost matrix and plan as JSON.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Rasterize a polygon to a run-length encoded mask.
    Rasterize {
        polygon: PathBuf,
        #[arg(long)]
        resolution: Option<Resolution>,
        /// Mask JSON destination; standard output if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset of convex polygons with noisy predictions.
    Gen {
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 10)]
        vertices: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        resolution: Option<Resolution>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the matching loss between two polygons as JSON.
    Loss {
        predicted: PathBuf,
        reference: PathBuf,
        #[arg(long)]
        epsilon_rel: Option<f64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LossKind {
    Pml,
    L1,
    Scheduled,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => commands::report_error(&err),
    }
}
