//! `pathsegkit` command-line driver.

mod commands;
mod config;
mod io;
mod provenance;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::provenance::Provenance;

#[derive(Debug, Parser)]
#[command(name = "pathsegkit", version, about = "Pathology segmentation toolkit")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-sample work (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BoxKindArg {
    Union,
    Instance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExplainMode {
    Importance,
    Cam,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SyntheticKind {
    Segmentation,
    Slides,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Rescale, tile and resize every manifest sample; writes a new manifest.
    Standardize {
        /// JSONL manifest; relative paths resolve against its directory.
        #[arg(long)]
        manifest: PathBuf,
        /// Target magnification (overrides the config value).
        #[arg(long)]
        target_mag: Option<f64>,
    },
    /// Mean Dice with bootstrap intervals per dataset, region, structure and object.
    Evaluate {
        /// Directory of predicted masks named after the ground-truth mask files.
        #[arg(long)]
        pred_dir: PathBuf,
        /// JSONL manifest; relative paths resolve against its directory.
        #[arg(long)]
        manifest: PathBuf,
        /// Which split of the manifest to include.
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// Union or instance box prompts derived from ground-truth masks.
    Boxes {
        /// JSONL manifest; relative paths resolve against its directory.
        #[arg(long)]
        manifest: PathBuf,
        /// Box kind (overrides the config value).
        #[arg(long, value_enum)]
        kind: Option<BoxKindArg>,
    },
    /// Trains the reference segmentation model on the manifest's training split.
    Train {
        /// JSONL manifest; relative paths resolve against its directory.
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Segments one image for one text prompt and writes the mask PNG.
    Predict {
        /// Model checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// RGB image to segment.
        #[arg(long)]
        image: PathBuf,
        /// Text prompt naming the target object.
        #[arg(long)]
        prompt: String,
    },
    /// Object-aware CAMs and perturbation importance for a slide set.
    Explain {
        /// JSONL slide set as written by `gen-synthetic --kind slides`.
        #[arg(long)]
        slides: PathBuf,
        /// Reuse this model's image encoder as the frozen feature extractor.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Which explanation outputs to compute.
        #[arg(long, value_enum, default_value = "all")]
        mode: ExplainMode,
    },
    /// Writes a seeded synthetic segmentation corpus or slide set.
    GenSynthetic {
        /// Segmentation samples or MIL slides.
        #[arg(long, value_enum, default_value = "segmentation")]
        kind: SyntheticKind,
    },
    /// Per-sample characteristics, prompt efficiency and Dice trends.
    Report {
        /// JSONL manifest; relative paths resolve against its directory.
        #[arg(long)]
        manifest: PathBuf,
        /// Directory of predicted masks named after the ground-truth mask files.
        #[arg(long)]
        pred_dir: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Standardize { .. } => "standardize",
            Command::Evaluate { .. } => "evaluate",
            Command::Boxes { .. } => "boxes",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
            Command::Explain { .. } => "explain",
            Command::GenSynthetic { .. } => "gen-synthetic",
            Command::Report { .. } => "report",
        }
    }
}

/// Shared state handed to every command.
pub struct Ctx {
    pub cfg: RunConfig,
    pub prov: Provenance,
    pub out: PathBuf,
}

/// Per-sample failures; any entry makes the process exit nonzero.
#[derive(Debug, Default)]
pub struct Outcome {
    pub failures: Vec<String>,
}

impl Outcome {
    pub fn fail(&mut self, sample: &str, err: impl std::fmt::Display) {
        log::error!("{sample}: {err}");
        self.failures.push(format!("{sample}: {err}"));
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    let cfg = RunConfig::load(cli.config.as_deref())?.resolve(cli.seed)?;
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let name = cli.command.name();
    log::info!("{name}: resolved config {}", serde_json::to_string(&cfg)?);
    std::fs::create_dir_all(&cli.out)?;
    let ctx = Ctx {
        prov: Provenance::new(name, cfg.hash(), cfg.seed),
        cfg,
        out: cli.out,
    };
    match cli.command {
        Command::Standardize { manifest, target_mag } => commands::standardize::run(&ctx, &manifest, target_mag),
        Command::Evaluate { pred_dir, manifest, split } => commands::evaluate::run(&ctx, &pred_dir, &manifest, split),
        Command::Boxes { manifest, kind } => commands::boxes::run(&ctx, &manifest, kind),
        Command::Train { manifest } => commands::train::run(&ctx, &manifest),
        Command::Predict { checkpoint, image, prompt } => commands::predict::run(&ctx, &checkpoint, &image, &prompt),
        Command::Explain { slides, checkpoint, mode } => commands::explain::run(&ctx, &slides, checkpoint.as_deref(), mode),
        Command::GenSynthetic { kind } => commands::synthetic::run(&ctx, kind),
        Command::Report { manifest, pred_dir } => commands::report::run(&ctx, &manifest, &pred_dir),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PATHSEGKIT_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(outcome) if outcome.failures.is_empty() => ExitCode::SUCCESS,
        Ok(outcome) => {
            log::error!("{} sample(s) failed", outcome.failures.len());
            ExitCode::from(1)
        }
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(2)
        }
    }
}
