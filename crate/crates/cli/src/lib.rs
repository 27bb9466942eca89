//! Command-line front end: ingest, preprocess, train, evaluate, predict.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use config::{resolve, Overrides};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "FOLLICLE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "follicle", version, about = "Scalp image classification pipeline")]
pub struct Cli {
    /// JSON pipeline config; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan `<root>/<class>/` and write a checksummed manifest.
    Ingest {
        /// Dataset root (defaults to `dataset_root` from the config).
        root: Option<PathBuf>,
        /// Manifest path (default `<out>/manifest.json`).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Denoise, equalize and resize every image of a manifest.
    Preprocess { manifest: PathBuf },
    /// Split, balance and train on a preprocessed manifest.
    Train { manifest: PathBuf },
    /// Metrics for a manifest, or predictions for a directory of images.
    Evaluate { model: PathBuf, input: PathBuf },
    /// Class probabilities for one image, as JSON.
    Predict { model: PathBuf, image: PathBuf },
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .with_context(|| format!("{THREADS_ENV} must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let cfg = resolve(cli.config.as_deref(), cli.seed, cli.out.as_deref(), &cli.overrides)?;
    match &cli.command {
        Command::Ingest { root, manifest } => commands::ingest(&cfg, root.as_deref(), manifest.as_deref()).map(drop),
        Command::Preprocess { manifest } => commands::preprocess(&cfg, manifest).map(drop),
        Command::Train { manifest } => commands::train(&cfg, manifest).map(drop),
        Command::Evaluate { model, input } => commands::evaluate(&cfg, model, input),
        Command::Predict { model, image } => commands::predict(model, image).map(drop),
    }
}
