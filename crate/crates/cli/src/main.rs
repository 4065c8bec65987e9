//! `patchfeas`: region bounds, feasibility tables, toy training and patch
//! attacks from one binary.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "patchfeas",
    version,
    about = "Linear-region bounds and patch attacks on segmentation networks"
)]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Seed for every random choice the subcommand makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads. Results do not depend on it.
    #[arg(long, global = true, env = "PATCHFEAS_WORKERS", default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-layer region-count factors of a network, or the channel sweep.
    Bounds(BoundsArgs),
    /// Largest output area whose class maps could all be produced.
    Feasibility(FeasibilityArgs),
    /// Receptive field per layer.
    Rf(RfArgs),
    /// Largest rectangle inside a class and the centred patch position.
    Place(PlaceArgs),
    /// Count linear regions of a tiny network on a grid.
    CountRegions(CountArgs),
    /// Write a shapes dataset.
    GenData(GenDataArgs),
    /// Train a network on a shapes dataset.
    Train(TrainArgs),
    /// Optimize a patch against a trained model.
    Attack(AttackArgs),
    /// Join feasibility tables with attack metrics.
    Report(ReportArgs),
    /// Check a run manifest against the files on disk.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    #[arg(long, required_unless_present = "sweep")]
    pub spec: Option<PathBuf>,
    /// Input shape as C,H,W; defaults to the spec's input.
    #[arg(long)]
    pub input: Option<String>,
    #[arg(long, default_value = "as_printed")]
    pub mode: String,
    /// Single-layer factor for (c0,25,25) -> (64,25,25) over a range of c0.
    #[arg(long, conflicts_with = "spec")]
    pub sweep: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FeasibilityArgs {
    /// Bound given only by its base-10 logarithm.
    #[arg(long, conflicts_with_all = ["spec", "preset"])]
    pub log10: Option<f64>,
    /// Compute the bound from a network restricted to the patch input.
    #[arg(long, conflicts_with = "preset")]
    pub spec: Option<PathBuf>,
    /// Built-in table of reference magnitudes.
    #[arg(long, value_parser = ["reference"])]
    pub preset: Option<String>,
    /// Patch size HxW; repeatable.
    #[arg(long = "patch")]
    pub patches: Vec<String>,
    #[arg(long, default_value_t = 19)]
    pub classes: u32,
    /// as_printed, per_layer_input or all.
    #[arg(long, default_value = "as_printed")]
    pub mode: String,
    /// Architecture label for --log10 rows.
    #[arg(long, default_value = "literal")]
    pub arch: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RfArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlaceArgs {
    /// Class-index mask (PGM).
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub class: u8,
    /// Patch size HxW to centre in the rectangle.
    #[arg(long)]
    pub patch: Option<String>,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long, default_value_t = 1001)]
    pub resolution: usize,
    /// Input box, the same LO,HI on every axis.
    #[arg(long, default_value = "-1,1", allow_hyphen_values = true)]
    pub domain: String,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value = "model.pseg")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// RGB image (PPM).
    #[arg(long)]
    pub image: PathBuf,
    /// Clean labels (PGM); defaults to the model's own prediction.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// class_switch:FROM:TO, erase:CLASS or custom:MASK.pgm. Classes by
    /// name or index.
    #[arg(long)]
    pub target: String,
    /// HxW@TOP,LEFT or HxW@auto.
    #[arg(long, default_value = "4x4@auto")]
    pub patch: String,
    #[arg(long, default_value_t = 5000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.01)]
    pub step: f32,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f32,
    #[arg(long)]
    pub eot: bool,
    #[arg(long, default_value_t = 2)]
    pub jitter: usize,
    #[arg(long, default_value_t = 0.02)]
    pub noise: f32,
    #[arg(long)]
    pub smooth: bool,
    #[arg(long, default_value = "attack")]
    pub out_prefix: String,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Feasibility CSV files or globs.
    #[arg(long = "feasibility", required = true)]
    pub feasibility: Vec<String>,
    /// Attack metrics JSON files or globs.
    #[arg(long = "metrics")]
    pub metrics: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    pub manifest: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
