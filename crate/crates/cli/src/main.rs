//! `lidarloc`: map building, rendering, perturbation, refinement,
//! evaluation and benchmarking from the command line.

mod commands;
mod config;
mod data;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::{BenchOptions, Context};
use crate::config::{RawConfig, RunConfig, DATASET_ENV};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "lidarloc", version, about = "Camera localization in LiDAR maps")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand. Values are validated by the
/// configuration layer so that errors name the config key.
#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use the bundled synthetic scene.
    #[arg(long, global = true)]
    synthetic: bool,
    /// KITTI odometry root (falls back to $LIDARLOC_DATASET).
    #[arg(long, global = true)]
    dataset: Option<String>,
    #[arg(long, global = true)]
    sequence: Option<String>,
    /// Map file to read, or to write for build-map.
    #[arg(long, global = true)]
    map: Option<String>,
    #[arg(long, global = true)]
    map_resolution: Option<String>,
    #[arg(long, global = true)]
    crop_forward: Option<String>,
    #[arg(long, global = true)]
    crop_lateral: Option<String>,
    #[arg(long, global = true)]
    crop_vertical: Option<String>,
    #[arg(long, global = true)]
    occlusion_window: Option<String>,
    #[arg(long, global = true)]
    occlusion_th: Option<String>,
    /// Disable the occlusion filter.
    #[arg(long, global = true)]
    no_occlusion: bool,
    /// Initial translation noise bound per axis (m).
    #[arg(long, global = true)]
    noise_t: Option<String>,
    /// Initial rotation noise bound per axis (deg).
    #[arg(long, global = true)]
    noise_r: Option<String>,
    /// Stage ranges as `t:r,t:r,...` (m:deg).
    #[arg(long, global = true)]
    stages: Option<String>,
    /// identity, oracle, grid or external.
    #[arg(long, global = true)]
    regressor: Option<String>,
    #[arg(long, global = true)]
    oracle_contraction: Option<String>,
    /// Score grid candidates with the occlusion filter enabled.
    #[arg(long, global = true)]
    grid_occlusion: bool,
    /// Request/response directory of the external regressor.
    #[arg(long, global = true)]
    spool: Option<String>,
    #[arg(long, global = true)]
    external_timeout_ms: Option<String>,
    #[arg(long, global = true)]
    seed: Option<String>,
    #[arg(long, global = true)]
    jobs: Option<String>,
    #[arg(long, global = true)]
    out: Option<String>,
    #[arg(long, global = true)]
    frames: Option<String>,
    #[arg(long, global = true)]
    first_frame: Option<String>,
    #[arg(long, global = true)]
    image_width: Option<String>,
    #[arg(long, global = true)]
    image_height: Option<String>,
    /// Omit wall-clock values so artifacts compare byte for byte.
    #[arg(long, global = true)]
    no_timestamp: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Accumulate scans into a voxelized map file.
    BuildMap,
    /// Render the map at a pose into depth PNG, raw dump and overlay.
    Render {
        #[arg(long, default_value_t = 0)]
        frame: usize,
        /// Camera-from-map pose as 12 row-major 3x4 values.
        #[arg(long, conflicts_with = "at_init")]
        pose: Option<String>,
        /// Render at the perturbed initial pose of the frame.
        #[arg(long)]
        at_init: bool,
    },
    /// Sample initial pose guesses.
    Perturb,
    /// Run the stage schedule on every frame.
    Refine,
    /// Summarize refinement traces and plot error densities.
    Eval {
        /// Directory holding refine_trace.json (defaults to --out).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Time the per-step breakdown and z-buffer scaling.
    Bench {
        #[arg(long, default_value_t = 10)]
        repetitions: usize,
        #[arg(long, default_value_t = lidarloc_core::bench::MIN_WARMUP)]
        warmup: usize,
        #[arg(long, default_value_t = 400_000)]
        scaling_points: usize,
    },
}

impl Common {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut v: Vec<(&'static str, String)> = [
            ("dataset", &self.dataset),
            ("sequence", &self.sequence),
            ("map", &self.map),
            ("map_resolution", &self.map_resolution),
            ("crop_forward", &self.crop_forward),
            ("crop_lateral", &self.crop_lateral),
            ("crop_vertical", &self.crop_vertical),
            ("occlusion_window", &self.occlusion_window),
            ("occlusion_th", &self.occlusion_th),
            ("noise_t", &self.noise_t),
            ("noise_r", &self.noise_r),
            ("stages", &self.stages),
            ("regressor", &self.regressor),
            ("oracle_contraction", &self.oracle_contraction),
            ("spool", &self.spool),
            ("external_timeout_ms", &self.external_timeout_ms),
            ("seed", &self.seed),
            ("jobs", &self.jobs),
            ("out", &self.out),
            ("frames", &self.frames),
            ("first_frame", &self.first_frame),
            ("image_width", &self.image_width),
            ("image_height", &self.image_height),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.clone().map(|v| (k, v)))
        .collect();
        if self.synthetic {
            v.push(("source", "synthetic".into()));
        }
        if self.no_occlusion {
            v.push(("occlusion", "false".into()));
        }
        if self.grid_occlusion {
            v.push(("grid_occlusion", "true".into()));
        }
        v
    }

    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut raw = RawConfig::defaults();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::keyed("config", "config", format!("{}: {e}", path.display())))?;
            raw.apply_text(&text, &path.display().to_string())?;
        }
        for (k, v) in self.overrides() {
            raw.set(k, v)?;
        }
        let env = std::env::var(DATASET_ENV).ok().filter(|s| !s.is_empty());
        Ok(RunConfig::from_raw(&raw, env.as_deref())?)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let ctx = Context { cfg: cli.common.resolve()?, timestamp: !cli.common.no_timestamp };
    match &cli.command {
        Command::BuildMap => commands::build_map_cmd(&ctx),
        Command::Render { frame, pose, at_init } => commands::render_cmd(&ctx, *frame, pose.as_deref(), *at_init),
        Command::Perturb => commands::perturb_cmd(&ctx),
        Command::Refine => commands::refine_cmd(&ctx),
        Command::Eval { input } => commands::eval_cmd(&ctx, input.as_deref()),
        Command::Bench { repetitions, warmup, scaling_points } => commands::bench_cmd(
            &ctx,
            &BenchOptions { repetitions: *repetitions, warmup: *warmup, scaling_points: *scaling_points },
        ),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
