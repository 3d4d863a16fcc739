//! Command-line entry point: the full pipeline as subcommands sharing one
//! config file, with deterministic, manifest-tracked run directories.

mod commands;
mod config;
mod runs;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::Ctx;
use config::AppConfig;

#[derive(Parser)]
#[command(
    name = "tactile-fusion",
    version,
    about = "Multimodal tactile-sequence fusion pipeline",
    arg_required_else_help = true
)]
struct Cli {
    /// TOML configuration file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset root (overrides config and TACTILE_FUSION_DATA).
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    /// Run directory for output artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for per-trial feature extraction.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Use seeds 0..N (overrides the config seed list).
    #[arg(long, global = true)]
    seeds: Option<usize>,
    /// Training epochs (overrides the config value).
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into the data root.
    Synth,
    /// Validate external trial directories and rewrite them canonically.
    Ingest {
        /// Source directory containing trial subdirectories.
        #[arg(long)]
        src: PathBuf,
    },
    /// Compute and cache PSD / flow / image feature tensors per trial.
    ExtractFeatures,
    /// Train the configured model over the configured seeds.
    Train,
    /// Evaluate a checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run an ablation grid: "bandwidth" or "modality".
    Ablate {
        #[arg(long)]
        grid: String,
    },
    /// Train on clean data, evaluate under injected background noise.
    NoiseEval,
    /// Property-head training with holdout-fabric evaluation.
    Properties,
    /// Export per-trial mean latent features to CSV.
    Latents {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();

    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().ok();
    }

    let mut cfg = AppConfig::load(cli.config.as_deref())?;
    if let Some(n) = cli.seeds {
        cfg.train.seeds = (0..n as u64).collect();
    }
    if let Some(e) = cli.epochs {
        cfg.train.epochs = e;
    }

    let data_root = cfg.data_root(cli.data_root.as_deref());
    let command_name = match &cli.command {
        Command::Synth => "synth",
        Command::Ingest { .. } => "ingest",
        Command::ExtractFeatures => "extract-features",
        Command::Train => "train",
        Command::Evaluate { .. } => "evaluate",
        Command::Ablate { .. } => "ablate",
        Command::NoiseEval => "noise-eval",
        Command::Properties => "properties",
        Command::Latents { .. } => "latents",
    };
    let out = cli.out.unwrap_or_else(|| PathBuf::from("runs").join(command_name));
    let ctx = Ctx { cfg, data_root, out };

    match cli.command {
        Command::Synth => commands::cmd_synth(&ctx),
        Command::Ingest { src } => commands::cmd_ingest(&ctx, &src),
        Command::ExtractFeatures => commands::cmd_extract_features(&ctx),
        Command::Train => commands::cmd_train(&ctx),
        Command::Evaluate { checkpoint } => commands::cmd_evaluate(&ctx, &checkpoint),
        Command::Ablate { grid } => commands::cmd_ablate(&ctx, &grid),
        Command::NoiseEval => commands::cmd_noise_eval(&ctx),
        Command::Properties => commands::cmd_properties(&ctx),
        Command::Latents { checkpoint } => commands::cmd_latents(&ctx, &checkpoint),
    }
}
