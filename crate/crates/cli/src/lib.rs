//! The `spinn` command line: synthesize, preprocess, train, predict and
//! gradient-check.

pub mod bundle;
pub mod manifest;

mod commands;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use bundle::RunBundle;
pub use commands::execute;
pub use manifest::RunManifest;

pub const EXIT_OK: u8 = 0;
/// A check ran and failed its threshold, or a run failed after starting.
pub const EXIT_FAILED: u8 = 1;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_OVERWRITE: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn input(m: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_INPUT,
            message: m.to_string(),
        }
    }

    pub fn failed(m: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_FAILED,
            message: m.to_string(),
        }
    }

    pub fn overwrite(path: &std::path::Path) -> Self {
        Self {
            code: EXIT_OVERWRITE,
            message: format!(
                "{} already exists and is not empty; pass --force to overwrite",
                path.display()
            ),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

#[derive(Debug, Parser)]
#[command(
    name = "spinn",
    version,
    about = "Physics-informed bridge scour forecasting"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic bridge record with known equation parameters.
    Synth(SynthArgs),
    /// Clean sensor files and report sequence counts per split.
    Preprocess(PreprocessArgs),
    /// Run an experiment spec: train, evaluate, export equations.
    Train(TrainArgs),
    /// Forecast from a checkpoint or evaluate a calibrated equation.
    Predict(PredictArgs),
    /// Compare loss gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, clap::Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 8000)]
    pub hours: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "synth")]
    pub bridge_id: String,
    /// Generate without sensor noise.
    #[arg(long)]
    pub noise_free: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, clap::Args)]
pub struct PreprocessArgs {
    /// Sensor files `timestamp,e_bed_m,e_stage_m,q_m3s`; the file stem is
    /// the bridge id.
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub bridge_attrs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 168)]
    pub m_in: usize,
    #[arg(long, default_value_t = 168)]
    pub m_out: usize,
    /// `as_built` or `first_step`.
    #[arg(long, default_value = "as_built")]
    pub e_ref: String,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub experiment_spec: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Directory holding `<bridge>.csv` files when the spec sets no
    /// `data_root`.
    #[arg(long, env = "SPINN_DATA_ROOT")]
    pub data_root: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, clap::Args)]
pub struct PredictArgs {
    #[arg(
        long,
        conflicts_with = "equation",
        required_unless_present = "equation"
    )]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub equation: Option<PathBuf>,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub bridge_attrs: Option<PathBuf>,
    /// Bridge id; defaults to the input file stem.
    #[arg(long)]
    pub bridge: Option<String>,
    /// Equation mode: window length in hours.
    #[arg(long, default_value_t = 168)]
    pub window: usize,
    /// Equation mode: hours between window starts.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Equation mode: reference override, `as_built` or `first_step`.
    #[arg(long)]
    pub e_ref: Option<String>,
}

#[derive(Debug, clap::Args)]
pub struct GradcheckArgs {
    /// `nlinear`, `lstm` or `cnn`.
    #[arg(long)]
    pub arch: String,
    /// `pure`, `spinn_hec18`, `spinn_td` or `spinn_gtd`.
    #[arg(long, default_value = "pure")]
    pub variant: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Scales analytic gradients before comparison (test hook).
    #[arg(long, hide = true, default_value_t = 1.0)]
    pub corrupt_gradient: f64,
}
