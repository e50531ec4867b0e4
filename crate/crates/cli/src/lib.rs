//! Command-line front end: argument parsing, config resolution and dispatch
//! to the pipeline commands.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use bagan::{Error, Result};
use clap::{Args, Parser, Subcommand};

use crate::commands::EvalInput;
use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "bagan", about = "Balanced conditional GAN training for imbalanced image datasets")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Run config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Apply the imbalance schedule and write the subset as a tensor container.
    PrepareData {
        #[arg(long)]
        schedule: Option<PathBuf>,
        #[arg(long)]
        source: Option<PathBuf>,
    },
    /// Train a stage-1 autoencoder.
    PretrainAe {
        /// supervised | unsupervised
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Adversarial training initialized from a stage-1 checkpoint.
    TrainGan {
        #[arg(long)]
        variant: Option<String>,
        /// v1 | v2 | v3
        #[arg(long)]
        version: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        stage1: Option<PathBuf>,
        /// both | generator_only | none
        #[arg(long)]
        init_mode: Option<String>,
        #[arg(long)]
        resume: bool,
    },
    /// Write generated images of one class.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long, default_value_t = 1)]
        n: usize,
    },
    /// Per-class FID, image grid and feature projection.
    Evaluate {
        #[arg(long, conflicts_with = "samples", required_unless_present = "samples")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        samples: Option<PathBuf>,
        #[arg(long)]
        grid_rows: Option<usize>,
        /// classifier | pretrained
        #[arg(long)]
        extractor: Option<String>,
        #[arg(long)]
        extractor_weights: Option<PathBuf>,
    },
    /// Project stage-1 latents to 2-D and score their class silhouette.
    PlotLatents {
        #[arg(long)]
        checkpoint: PathBuf,
        /// pca | tsne
        #[arg(long)]
        projection: Option<String>,
    },
}

/// Config file values with command-line flags applied on top.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.global.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.global.out {
        cfg.out = out.clone();
    }
    match &cli.command {
        Command::PrepareData { schedule, source } => {
            if schedule.is_some() {
                cfg.dataset.schedule = schedule.clone();
            }
            if source.is_some() {
                cfg.dataset.source = source.clone();
            }
        }
        Command::PretrainAe { mode, epochs } => {
            if let Some(m) = mode {
                cfg.pretrain.mode = m.clone();
            }
            if let Some(e) = epochs {
                cfg.pretrain.epochs = *e;
            }
        }
        Command::TrainGan {
            variant,
            version,
            epochs,
            stage1,
            init_mode,
            resume,
        } => {
            if let Some(v) = variant {
                cfg.loss.variant = v.clone();
            }
            if let Some(v) = version {
                cfg.loss.bagan_gp_version = v.clone();
            }
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if stage1.is_some() {
                cfg.train.stage1 = stage1.clone();
            }
            if let Some(m) = init_mode {
                cfg.train.init_mode = m.clone();
            }
            cfg.train.resume |= resume;
        }
        Command::Evaluate {
            grid_rows,
            extractor,
            extractor_weights,
            ..
        } => {
            if let Some(r) = grid_rows {
                cfg.eval.grid_rows = *r;
            }
            if let Some(e) = extractor {
                cfg.eval.extractor = e.clone();
            }
            if extractor_weights.is_some() {
                cfg.eval.extractor_weights = extractor_weights.clone();
            }
        }
        Command::PlotLatents { projection, .. } => {
            if let Some(p) = projection {
                cfg.eval.projection = p.clone();
            }
        }
        Command::Generate { .. } => {}
    }
    cfg.validate()
        .map_err(|(section, key, msg)| Error::Config(format!("{section}.{key}: {msg}")))?;
    Ok(cfg)
}

/// Runs the parsed command and returns a one-paragraph summary.
pub fn run(cli: &Cli) -> Result<String> {
    let cfg = resolve_config(cli)?;
    let out = cfg.out.display().to_string();
    Ok(match &cli.command {
        Command::PrepareData { .. } => {
            let summary = commands::prepare_data(&cfg)?;
            format!("{}wrote {}", summary.table(), summary.container.display())
        }
        Command::PretrainAe { .. } => {
            let log = commands::pretrain_ae(&cfg)?;
            format!(
                "stage-1 checkpoint in {out}/checkpoint; final mse {:.6}",
                log.final_mse().unwrap_or(f64::NAN)
            )
        }
        Command::TrainGan { .. } => {
            let outcome = commands::train_gan(&cfg)?;
            format!(
                "trained to epoch {} ({} steps); final checkpoint {}",
                outcome.state.epoch,
                outcome.state.step,
                outcome.final_checkpoint.display()
            )
        }
        Command::Generate { checkpoint, class, n } => {
            let files = commands::generate(&cfg, checkpoint, *class, *n)?;
            format!("wrote {} images to {out}", files.len())
        }
        Command::Evaluate {
            checkpoint, samples, ..
        } => {
            let input = match (checkpoint, samples) {
                (Some(c), _) => EvalInput::Checkpoint(c.clone()),
                (None, Some(s)) => EvalInput::Samples(s.clone()),
                (None, None) => return Err(Error::Config("need --checkpoint or --samples".into())),
            };
            let outcome = commands::evaluate(&cfg, &input)?;
            outcome.report.to_csv()
        }
        Command::PlotLatents { checkpoint, .. } => {
            let d = commands::plot_latents(&cfg, checkpoint)?;
            format!("silhouette {:.4}{}", d.silhouette, if d.degenerate { " (degenerate)" } else { "" })
        }
    })
}
