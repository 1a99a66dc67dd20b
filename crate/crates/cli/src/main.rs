//! `hazefork`: synthesise training data, train the forked network, dehaze and score.
//!
//! Exit codes: 0 success, 1 numerical failure, 2 usage or input error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "hazefork", version, about = "Single-image dehazing with a forked transmittance/illumination network")]
pub struct Cli {
    /// TOML configuration file; flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for every random choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// More log output (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build training patches from RGB-D pairs listed in a manifest.
    Synth(SynthArgs),
    /// Train a network on a synthesised dataset.
    Train(TrainArgs),
    /// Dehaze an image with a trained network (or with given maps).
    Dehaze(DehazeArgs),
    /// Recover a scene from a hazy image and its true t and A.
    OracleDehaze(OracleArgs),
    /// Score dehazed images against references.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// CSV with header `rgb,depth`; depth maps are PFM files in metres.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for sample records and `index.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Patch side.
    #[arg(long)]
    pub omega: Option<usize>,
    /// Minimum grayscale variance of a kept hazy patch (exclusive).
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Keep at most this many patches per image.
    #[arg(long)]
    pub patches_per_image: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// Weight file to write; the spec and loss log are written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Network topology (TOML). Defaults to the built-in one.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Patch side; overrides the spec's.
    #[arg(long)]
    pub omega: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    /// Enabled loss terms, e.g. `l1,l2,l3` or `l3`, or `mse` for map regression.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Loss log CSV (default: `<out>.loss.csv`).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DehazeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Weight file written by `train`.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Network topology (default: `<weights>.spec.toml` if present, else built-in).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Expected network patch side; must match the spec.
    #[arg(long)]
    pub omega: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Level tiling stride is the level patch size divided by this.
    #[arg(long)]
    pub stride_divisor: Option<usize>,
    /// Per-level t weights, comma separated (default all 1).
    #[arg(long, value_delimiter = ',')]
    pub t_weights: Option<Vec<f64>>,
    /// Per-level A weights, comma separated (default all 1).
    #[arg(long, value_delimiter = ',')]
    pub a_weights: Option<Vec<f64>>,
    /// Smoothness weight of the regularizer.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Edge epsilon of the regularizer.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Conjugate-gradient relative residual tolerance.
    #[arg(long)]
    pub cg_tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Also write t, A, the coverage mask and a side-by-side comparison.
    #[arg(long)]
    pub emit_maps: bool,
    /// Use this transmittance map instead of estimating one (needs `--oracle-a`).
    #[arg(long, requires = "oracle_a")]
    pub oracle_t: Option<PathBuf>,
    /// Illumination map file or constant `r,g,b` (needs `--oracle-t`).
    #[arg(long, requires = "oracle_t")]
    pub oracle_a: Option<String>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub hazy: PathBuf,
    /// Transmittance map (grayscale image or PFM).
    #[arg(long)]
    pub t: PathBuf,
    /// Illumination map file or constant `r,g,b`.
    #[arg(long)]
    pub a: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// CSV with header `output,reference`; `output` names a file in `--outputs`.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Directory holding the dehazed images.
    #[arg(long)]
    pub outputs: PathBuf,
    /// Score CSV (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Info,
        1 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("HAZEFORK_LOG")
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
