//! `fieldscale` command-line interface.
//!
//! Exit codes: 0 on success, 2 for invalid arguments or inputs, 1 for
//! runtime failures.

mod commands;
mod config;
mod models;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::ConfigFile;

/// Invalid user input detected by the CLI itself.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "fieldscale", version, about = "Tiled field-boundary inference, extraction and evaluation")]
pub struct Cli {
    /// Emit machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,

    /// TOML config file; command-line flags take precedence over it.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Worker threads for parallel sections (never changes results).
    #[arg(long, global = true, env = "FIELDSCALE_WORKERS")]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic world: bands, labels, ids and GeoJSON polygons.
    Synth(SynthArgs),
    /// Tiled inference with Gaussian-weighted stitching.
    Stitch(StitchArgs),
    /// Polygonize interior components of a logit raster into GeoJSON.
    Extract(ExtractArgs),
    /// Pixel, object and AP metrics against a ground-truth mask.
    Evaluate(EvaluateArgs),
    /// Translation consistency and input-order/preprocessing/scale sensitivity.
    Robustness(RobustnessArgs),
    /// Planting and harvest day-of-year windows for a latitude.
    Seasons(SeasonsArgs),
    /// Greedy scene selection and median composite for a scene directory.
    SelectScenes(SelectScenesArgs),
    /// Change mask between two years of logits.
    Change(ChangeArgs),
    /// Finite-difference check of every loss gradient.
    LossCheck(LossCheckArgs),
    /// Field count and area statistics of a GeoJSON layer.
    Stats(StatsArgs),
    /// Serve a stub model over the framed stdin/stdout protocol.
    #[command(hide = true)]
    ServeModel(ServeModelArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub fields: Option<usize>,
    /// Target fraction of background pixels.
    #[arg(long)]
    pub background: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StitchArgs {
    /// Band stack `.fsr` (`[T, B, H, W]`).
    #[arg(long)]
    pub input: PathBuf,
    /// Output logits `.fsr` (`[C, H, W]`).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub overlap: Option<f64>,
    /// Apodization sigma in pixels (default: patch size / 4).
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Logit scale of stub models.
    #[arg(long)]
    pub logit_gain: Option<f64>,
    /// Normalization applied before inference, as JSON.
    #[arg(long)]
    pub normalization: Option<String>,
    /// Write the run report here as well.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Logits `.fsr` (`[C, H, W]`).
    #[arg(long)]
    pub logits: PathBuf,
    /// Output GeoJSON.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub block_size: Option<usize>,
    #[arg(long)]
    pub min_area_px: Option<usize>,
    #[arg(long)]
    pub simplify_tol: Option<f64>,
    /// Pixel connectivity: 4 or 8.
    #[arg(long)]
    pub connectivity: Option<u8>,
    /// Also write the argmax label mask.
    #[arg(long)]
    pub mask_out: Option<PathBuf>,
    /// Also write the instance id raster.
    #[arg(long)]
    pub ids_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Prediction: GeoJSON polygons or a `[C, H, W]` logits/probability `.fsr`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth label mask `.fsr`.
    #[arg(long)]
    pub gt: PathBuf,
    /// Treat a raster prediction as probabilities rather than logits.
    #[arg(long)]
    pub probabilities: bool,
    #[arg(long)]
    pub conf_thresh: Option<f64>,
    #[arg(long)]
    pub iou_thresh: Option<f64>,
    /// Instance matching: greedy or optimal.
    #[arg(long)]
    pub matching: Option<String>,
    #[arg(long)]
    pub connectivity: Option<u8>,
    /// Copy throughput from a `stitch` report.
    #[arg(long)]
    pub stitch_report: Option<PathBuf>,
    /// Print the summary CSV header and row instead of the report.
    #[arg(long)]
    pub csv: bool,
    /// Write the report JSON here as well.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RobustnessArgs {
    #[arg(long)]
    pub model: Option<String>,
    /// Evaluation sample as `<bands.fsr>:<mask.fsr>`; repeatable. Synthetic
    /// worlds are generated when none is given.
    #[arg(long)]
    pub sample: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of synthetic worlds.
    #[arg(long)]
    pub worlds: Option<usize>,
    /// Side of synthetic worlds; also the consistency patch size `S`.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub fields: Option<usize>,
    #[arg(long)]
    pub background: Option<f64>,
    /// Consistency crop size `p` (default 3S/4).
    #[arg(long)]
    pub crop: Option<usize>,
    /// Crop sizes for the agreement sweep, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub sweep: Option<Vec<usize>>,
    /// Scale factors, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<f64>>,
    /// Multiplicative brightness factors, comma separated (none by default).
    #[arg(long, value_delimiter = ',')]
    pub brightness: Option<Vec<f64>>,
    /// Reference normalization as JSON.
    #[arg(long)]
    pub reference: Option<String>,
    #[arg(long)]
    pub logit_gain: Option<f64>,
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Args)]
pub struct SeasonsArgs {
    #[arg(long, allow_hyphen_values = true)]
    pub lat: f64,
}

#[derive(Debug, Args)]
pub struct SelectScenesArgs {
    /// Directory holding `scenes.json` and the scene rasters.
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long)]
    pub target_coverage: Option<u32>,
    #[arg(long)]
    pub max_scenes: Option<usize>,
    #[arg(long)]
    pub max_cloud: Option<f64>,
    /// Composite output `.fsr`; observation counts go to `<out>_count`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ChangeArgs {
    #[arg(long)]
    pub y1: PathBuf,
    #[arg(long)]
    pub y2: PathBuf,
    #[arg(long)]
    pub thresh: Option<f64>,
    /// Class plane to compare (default interior).
    #[arg(long)]
    pub class: Option<usize>,
    /// Output mask `.fsr`.
    #[arg(long)]
    pub out: PathBuf,
    /// Output change polygons.
    #[arg(long)]
    pub geojson: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LossCheckArgs {
    #[arg(long)]
    pub seeds: Option<u64>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    /// Also check class-weighted variants with this boundary weight.
    #[arg(long)]
    pub omega: Option<f64>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// GeoJSON field layer.
    #[arg(long)]
    pub geojson: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeModelArgs {
    #[arg(long, default_value = "oracle")]
    pub model: String,
    #[arg(long, default_value_t = 2)]
    pub frames: usize,
    #[arg(long, default_value_t = 4)]
    pub bands: usize,
    #[arg(long, default_value_t = 10.0)]
    pub logit_gain: f64,
}

/// Result of a subcommand: JSON for `--json`, text otherwise.
pub struct Output {
    pub json: serde_json::Value,
    pub text: String,
    /// False when the command ran but its check failed (exit 1).
    pub ok: bool,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    if let Some(e) = err.downcast_ref::<fieldscale::Error>() {
        return if e.is_validation() { 2 } else { 1 };
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let json = cli.json;
    let result = ConfigFile::load(cli.config.as_deref()).and_then(|cfg| commands::run(cli, &cfg));
    match result {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(out)) => {
            if json {
                println!("{}", serde_json::to_string_pretty(&out.json).expect("serializable output"));
            } else {
                print!("{}", out.text);
            }
            if out.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
