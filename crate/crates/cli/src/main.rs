//! Command-line driver for the detection label pipeline: synthetic scene
//! generation, pseudo-GT clustering, toy training, and VOC-style
//! evaluation.
//!
//! Exit codes: 0 on success, 1 on an internal invariant violation, 2 on bad
//! input (missing files, malformed configs, invalid arguments).

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

mod bundle;
mod commands;
mod config;
mod overlay;

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad input: exit code 2.
    User(String),
    /// Broken internal invariant: exit code 1.
    Internal(String),
}

impl CliError {
    pub fn user(msg: impl Into<String>) -> Self {
        CliError::User(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        CliError::Internal(msg.into())
    }
}

impl From<dthcp::Error> for CliError {
    fn from(err: dthcp::Error) -> Self {
        if err.is_user_error() {
            CliError::User(err.to_string())
        } else {
            CliError::Internal(err.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::User(err.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "dthcp",
    about = "Dual-threshold heatmap clustering pipeline for weakly supervised detection"
)]
struct Cli {
    /// Config file, JSON or key=value lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Disable the negative-certainty loss on ignored proposals.
    #[arg(long = "no-cls-ign", global = true)]
    no_cls_ign: bool,

    /// Number of refinement stages K.
    #[arg(long, global = true)]
    stages: Option<usize>,

    /// Low and high heatmap thresholds.
    #[arg(long, global = true, num_args = 2, value_names = ["LOW", "HIGH"])]
    thresholds: Option<Vec<f64>>,

    /// Threshold-box enlargement factor.
    #[arg(long, global = true)]
    scale: Option<f64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scene bundles.
    Synth {
        /// Number of scenes (overrides the config).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Build pseudo-GT clusters from heatmap grids and proposals.
    Cluster {
        /// Heatmap grid file per class, as CLASS=PATH; repeatable.
        #[arg(long = "heatmap", value_name = "CLASS=PATH")]
        heatmaps: Vec<String>,

        /// CSV of proposal boxes, one x1,y1,x2,y2 line each.
        #[arg(long)]
        proposals: Option<PathBuf>,

        /// Total class count (defaults to max heatmap class + 1).
        #[arg(long = "num-classes")]
        num_classes: Option<usize>,

        /// Image extent as WxH (defaults to the first heatmap's grid size).
        #[arg(long = "image-size", value_name = "WxH")]
        image_size: Option<String>,

        /// Also write one overlay pixmap per class.
        #[arg(long)]
        overlay: bool,
    },
    /// Train the toy detector on a directory of scene bundles.
    Train {
        /// Directory produced by `synth`.
        #[arg(long = "scene-dir")]
        scene_dir: PathBuf,
    },
    /// Score detections against ground truth.
    Eval {
        /// Detections CSV: image_id,class_id,x1,y1,x2,y2,score.
        #[arg(long)]
        detections: PathBuf,

        /// Ground-truth CSV: image_id,class_id,x1,y1,x2,y2.
        #[arg(long = "ground-truth")]
        ground_truth: PathBuf,

        /// Optional pseudo-GT CSV to diagnose (same shape as detections).
        #[arg(long)]
        pseudo: Option<PathBuf>,
    },
}

fn parse_image_size(text: &str) -> Result<(usize, usize), CliError> {
    let (w, h) = text
        .split_once('x')
        .ok_or_else(|| CliError::user(format!("expected WxH, got '{text}'")))?;
    let w = w
        .trim()
        .parse()
        .map_err(|e| CliError::user(format!("bad width '{w}': {e}")))?;
    let h = h
        .trim()
        .parse()
        .map_err(|e| CliError::user(format!("bad height '{h}': {e}")))?;
    Ok((w, h))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if cli.no_cls_ign {
        config.trainer.use_cls_ign = false;
    }
    if let Some(stages) = cli.stages {
        config.hgps.stages = stages;
    }
    if let Some(thresholds) = &cli.thresholds {
        config.hgps.tau_low = thresholds[0];
        config.hgps.tau_high = thresholds[1];
    }
    if let Some(scale) = cli.scale {
        config.hgps.r = scale;
    }
    let out_dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));

    match cli.command {
        Command::Synth { n } => {
            if let Some(n) = n {
                config.scenes = n;
            }
            commands::cmd_synth(&config, &out_dir)
        }
        Command::Cluster {
            heatmaps,
            proposals,
            num_classes,
            image_size,
            overlay,
        } => {
            let args = commands::ClusterArgs {
                heatmaps: commands::parse_heatmap_args(&heatmaps)?,
                proposals,
                num_classes,
                image_size: image_size.as_deref().map(parse_image_size).transpose()?,
                overlay,
            };
            commands::cmd_cluster(&config, &args, &out_dir)
        }
        Command::Train { scene_dir } => commands::cmd_train(&config, &scene_dir, &out_dir),
        Command::Eval {
            detections,
            ground_truth,
            pseudo,
        } => commands::cmd_eval(
            &detections,
            &ground_truth,
            pseudo.as_deref(),
            cli.out.as_deref(),
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
