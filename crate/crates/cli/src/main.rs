//! `guidir` command-line front end.
//!
//! Exit codes: 0 on success, 2 when the input or options are invalid, 3 when a
//! computation fails.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::resolve;

#[derive(Parser)]
#[command(name = "guidir", version, about = "Diffusion-prior image restoration at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a captioned texture corpus with a manifest.
    Synth(SynthFlags),
    /// Degrade the positive images of a manifest.
    Degrade(DegradeFlags),
    /// Train the controlled denoiser on a corpus.
    Train(TrainFlags),
    /// Pretrain the autoencoder and fine-tune a degradation-robust encoder.
    TrainEncoder(TrainEncoderFlags),
    /// Write cleaned previews D(E(x)) of LQ images.
    Preview(PreviewFlags),
    /// Restore LQ images with the guided sampler.
    Restore(RestoreFlags),
    /// Compute PSNR/SSIM of restored images against ground truth.
    Evaluate(EvaluateFlags),
    /// Restore under several tau_r values and tabulate the metrics.
    SweepTau(SweepFlags),
}

#[derive(Args, Serialize)]
struct SynthFlags {
    /// TOML or JSON file of options; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    /// Output directory (default: $GUIDIR_CACHE/corpus).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    negative_ratio: Option<f64>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, value_enum)]
    palette: Option<PaletteArg>,
}

#[derive(Clone, Copy, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum PaletteArg {
    Gray,
    Rgb,
}


#[derive(Args, Serialize)]
struct DegradeFlags {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Named preset: sr4, sr8, blur2-sr4, sr4-noise40, mix-full.
    #[arg(long)]
    preset: Option<String>,
    /// JSON degradation spec file.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Serialize)]
struct TrainFlags {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Corpus directory (default: $GUIDIR_CACHE/corpus).
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to continue from.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Re-copy the base encoder into the adaptor and zero the connectors.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    reset_control: Option<bool>,
    /// Training degradation preset (default: randomized ranges).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    sigma_mean: Option<f64>,
    #[arg(long)]
    sigma_std: Option<f64>,
    #[arg(long)]
    negative_ratio: Option<f64>,
    #[arg(long, value_enum)]
    target: Option<TargetArg>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    blocks_per_stage: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum TargetArg {
    Base,
    Control,
    Joint,
}


#[derive(Args, Serialize)]
struct TrainEncoderFlags {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fine-tune degradation preset (default: randomized ranges).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    finetune_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Serialize)]
struct PreviewFlags {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Serialize)]
struct RestoreFlags {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Directory of LQ PNGs.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Robust encoder checkpoint; LQ inputs are replaced by their previews.
    #[arg(long)]
    encoder: Option<PathBuf>,
    /// Caption manifest (default: <input>/manifest.jsonl).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Caption tokens for every image, comma separated.
    #[arg(long, value_delimiter = ',')]
    prompt: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    negative_prompt: Option<Vec<String>>,
    /// Sampler name: restoration-guided or edm.
    #[arg(long)]
    sampler: Option<String>,
    #[arg(long, value_enum)]
    cfg_order: Option<CfgOrderArg>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    tau_r: Option<f64>,
    #[arg(long)]
    lambda_cfg: Option<f64>,
    #[arg(long)]
    s_churn: Option<f64>,
    #[arg(long)]
    s_noise: Option<f64>,
    #[arg(long)]
    s_min: Option<f64>,
    #[arg(long)]
    s_max: Option<f64>,
    #[arg(long)]
    guidance_enabled: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Write a per-step CSV trace next to every output.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    trace: Option<bool>,
}

#[derive(Clone, Copy, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum CfgOrderArg {
    BeforeGuidance,
    AfterGuidance,
}


#[derive(Args, Serialize)]
struct EvaluateFlags {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    restored: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Where metrics.csv and summary.json go (default: the restored directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct SweepFlags {
    #[command(flatten)]
    #[serde(flatten)]
    restore: RestoreFlags,
    /// Ground-truth directory; adds PSNR/SSIM against GT columns.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Comma-separated tau_r values (default 0,1,2,4,6).
    #[arg(long, value_delimiter = ',')]
    taus: Option<Vec<f64>>,
}

fn run(cli: Cli) -> guidir::Result<()> {
    match cli.command {
        Command::Synth(f) => commands::synth(resolve(f.config.as_deref(), &f)?),
        Command::Degrade(f) => commands::degrade(resolve(f.config.as_deref(), &f)?),
        Command::Train(f) => commands::train(resolve(f.config.as_deref(), &f)?),
        Command::TrainEncoder(f) => commands::train_encoder(resolve(f.config.as_deref(), &f)?),
        Command::Preview(f) => commands::preview(resolve(f.config.as_deref(), &f)?),
        Command::Restore(f) => commands::restore(resolve(f.config.as_deref(), &f)?),
        Command::Evaluate(f) => commands::evaluate(resolve(f.config.as_deref(), &f)?),
        Command::SweepTau(f) => commands::sweep_tau(resolve(f.restore.config.as_deref(), &f)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
