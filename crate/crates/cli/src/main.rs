mod commands;
mod error;
mod files;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use deepbet_core::{Mode, Profile, ToolConfig};

use error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "deepbet", version, about = "Two-stage LinkNet brain extraction for T1-weighted MRI")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Global {
    /// Built-in settings to start from: desk (64³/128³ stages, small nets) or paper.
    #[arg(long, global = true, default_value = "desk", value_parser = parse_profile)]
    pub profile: Profile,
    /// TOML file with [preprocess], [augment], [network], [train] and [pipeline] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. --set pipeline.margin_fraction=0.15 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = parse_override)]
    pub overrides: Vec<(String, String)>,
    /// Worker threads.
    #[arg(long, global = true, env = "DEEPBET_THREADS", default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Skull-strip one image, or every NIfTI file in a directory.
    Extract(ExtractArgs),
    /// Train all networks for a mode from *_img/*_mask pairs.
    Train(TrainArgs),
    /// Write synthetic head phantoms with ground-truth masks.
    Phantom(PhantomArgs),
    /// Dice of predicted masks against ground truth, matched by subject id.
    Eval(EvalArgs),
    /// Time end-to-end extraction.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    /// Input image, or a directory of images.
    #[arg(long)]
    pub input: PathBuf,
    /// Brain-only image (voxels outside the mask set to 0); a directory when --input is one.
    #[arg(long)]
    pub output: PathBuf,
    /// Weights file written by `deepbet train`.
    #[arg(long)]
    pub weights: PathBuf,
    /// Binary brain mask (uint8); a directory when --input is one.
    #[arg(long)]
    pub mask_out: Option<PathBuf>,
    /// Probability threshold for the final mask.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// 3d: two 3D stages; 2d: 3D localization, then per-view 2D slices.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory with <id>_img and <id>_mask NIfTI pairs.
    #[arg(long)]
    pub data: PathBuf,
    /// Weights file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    /// Per-step loss log (CSV).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    #[arg(long)]
    pub count: usize,
    /// Output directory for <id>_img.nii.gz / <id>_mask.nii.gz.
    #[arg(long)]
    pub out: PathBuf,
    /// Grid size: N for a cube or XxYxZ.
    #[arg(long, default_value = "64", value_parser = parse_dims)]
    pub size: [usize; 3],
    /// Seed of the first phantom; the rest follow consecutively.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Predicted binary masks.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth (possibly probabilistic) masks.
    #[arg(long)]
    pub truth: PathBuf,
    /// CSV report to write.
    #[arg(long)]
    pub report: PathBuf,
    /// Ground-truth binarization threshold.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Pick the ground-truth threshold from 0.1..0.9 that maximizes median Dice.
    #[arg(long, conflicts_with = "threshold")]
    pub calibrate: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Directory of images to extract.
    #[arg(long)]
    pub input: PathBuf,
    /// Timed passes over the directory.
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    s.parse().map_err(|e: deepbet_core::Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: deepbet_core::Error| e.to_string())
}

fn parse_override(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or("expected KEY=VALUE")?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.parse::<usize>().map_err(|e| format!("'{p}': {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [n] => Ok([n; 3]),
        [x, y, z] => Ok([x, y, z]),
        _ => Err("expected N or XxYxZ".into()),
    }
}

impl Global {
    /// Profile, then --config, then --set, then `extra` (dedicated flags).
    pub fn tool_config(&self, extra: &[(String, String)]) -> CliResult<ToolConfig> {
        let mut all = self.overrides.clone();
        all.extend_from_slice(extra);
        Ok(ToolConfig::load(self.profile, self.config.as_deref(), &all)?)
    }
}

fn run(argv: Vec<OsString>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.jobs.max(1))
        .build_global()
        .map_err(|e| CliError::Internal(e.to_string()))
        .and_then(|_| {
            std::panic::catch_unwind(|| commands::dispatch(&cli))
                .unwrap_or_else(|_| Err(CliError::Internal("unexpected panic".into())))
        });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("deepbet: {e}");
            e.code()
        }
    }
}

fn main() {
    std::process::exit(run(std::env::args_os().collect()));
}
