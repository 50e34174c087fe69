// SPDX-License-Identifier: MIT OR Apache-2.0

//! `latentscope` command-line pipeline: corpus and planted model generation,
//! SAE training, probing, interpretation, interventions and bias audits.
//!
//! Each subcommand reads prior-stage artifacts from `--in-dir` (default:
//! `--out-dir`), writes its outputs and a `<command>.manifest.json` into
//! `--out-dir`, and writes nothing at all when it fails.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use latentscope::Precision;

#[derive(Debug, Parser)]
#[command(name = "latentscope", version, about = "SAE probing, steering, ablation and bias audits on toy transformers")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML config for the subcommand; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Directory holding prior-stage artifacts; defaults to `--out-dir`.
    #[arg(long, global = true)]
    pub in_dir: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Exit nonzero when a statistic is flagged degenerate.
    #[arg(long, global = true)]
    pub strict: bool,
    /// Numeric precision of the model's residual stream.
    #[arg(long, global = true, value_enum)]
    pub precision: Option<PrecisionArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    Fp32,
    Fp64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Fp32 => Self::Fp32,
            PrecisionArg::Fp64 => Self::Fp64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Build the planted model and vocabulary and generate a corpus.
    GenCorpus,
    /// Train a sparse autoencoder on residual activations of the corpus.
    TrainSae,
    /// Fit an ℓ1 logistic probe on max-aggregated SAE features.
    Probe,
    /// Extract top-activating contexts and score keyword descriptions.
    Interp,
    /// Steer one latent and select the steering factor.
    Steer,
    /// Zero-ablate latents at one or more hooks.
    Ablate,
    /// Exact per-position latent effects on the answer logit difference.
    Effect,
    /// Counterfactual bias audit with anti-bias-prompt and ablation arms.
    Audit,
}

impl Command {
    #[must_use]
    pub fn name(self) -> &'static str {
        match self {
            Self::GenCorpus => "gen-corpus",
            Self::TrainSae => "train-sae",
            Self::Probe => "probe",
            Self::Interp => "interp",
            Self::Steer => "steer",
            Self::Ablate => "ablate",
            Self::Effect => "effect",
            Self::Audit => "audit",
        }
    }
}

/// What a successful run produced.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub written: Vec<PathBuf>,
    pub degeneracy_flags: Vec<String>,
}

/// Run one subcommand, inside a sized thread pool when `--jobs` is given.
pub fn run(cli: &Cli) -> Result<Outcome> {
    match cli.common.jobs {
        Some(0) => anyhow::bail!("--jobs must be at least 1"),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .context("building worker pool")?
            .install(|| commands::dispatch(cli.command, &cli.common)),
        None => commands::dispatch(cli.command, &cli.common),
    }
}

/// Parse `args` (including the program name) and run.
pub fn run_from_args<I, T>(args: I) -> Result<Outcome>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    run(&cli)
}
