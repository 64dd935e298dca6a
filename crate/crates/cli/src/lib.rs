//! Command-line entry points and the HTTP tile service.

pub mod commands;
pub mod service;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "splitsr", version, about = "Lightweight super-resolution engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Upscale one PNG.
    Upscale(UpscaleArgs),
    /// Print parameter and MAC counts of a network configuration.
    Cost(CostArgs),
    /// Score an upscaler on a directory of PNGs.
    Eval(EvalArgs),
    /// Train a network and write its weight file.
    Train(TrainArgs),
    /// Serve tiles, zoom requests and ratings over HTTP.
    Serve(ServeArgs),
}

/// Where the network configuration comes from.
#[derive(Debug, Args)]
pub struct ConfigSource {
    /// Config file: `key = value` lines or a JSON object.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// `latency` or `accuracy`; the default when no config file is given.
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Debug, Args)]
pub struct UpscaleArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Weight file, or a built-in method name (bilinear, bicubic).
    #[arg(long, default_value = "bilinear")]
    pub model: String,
    /// Defaults to the weight file's scale, or 4 for built-in methods.
    #[arg(long)]
    pub scale: Option<usize>,
    /// High-resolution reference; PSNR and SSIM on luma are printed.
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[command(flatten)]
    pub source: ConfigSource,
    /// Low-resolution input size the MAC count refers to, as `HxW`.
    #[arg(long, default_value = "180x320")]
    pub input_size: String,
    /// Also print parameter sweeps over split ratio, hybrid index, hybrid
    /// mode and replacement location.
    #[arg(long)]
    pub table: bool,
    #[arg(long, conflicts_with = "table")]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Weight file, or a built-in method name (bilinear, bicubic,
    /// passthrough).
    #[arg(long)]
    pub model: String,
    /// Directory of high-resolution PNGs.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub scale: usize,
    /// Border pixels ignored when scoring; defaults to the scale.
    #[arg(long)]
    pub shave: Option<usize>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub source: ConfigSource,
    /// Directory of high-resolution PNGs.
    #[arg(long, required_unless_present = "synthetic", conflicts_with = "synthetic")]
    pub dataset: Option<PathBuf>,
    /// Train on generated images instead of a dataset.
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long, default_value_t = 64)]
    pub synthetic_count: usize,
    #[arg(long, default_value_t = 64)]
    pub synthetic_size: usize,
    /// Weight file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss trace; defaults to the weight path with a `.csv` extension.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// Side of the high-resolution training crop.
    #[arg(long, default_value_t = 96)]
    pub patch: usize,
    /// Steps between learning-rate halvings; defaults to a third of the run.
    #[arg(long)]
    pub decay_every: Option<usize>,
    /// Seeds initialisation, cropping and synthetic data.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Print the loss every this many steps; 0 disables.
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Weight file of a x4 network, or a built-in method name.
    #[arg(long)]
    pub model: String,
    /// Directory of PNGs; each file stem becomes an image id.
    #[arg(long)]
    pub images: PathBuf,
    /// Ratings are appended here as JSON lines.
    #[arg(long, default_value = "ratings.jsonl")]
    pub ratings: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub workers: usize,
}
