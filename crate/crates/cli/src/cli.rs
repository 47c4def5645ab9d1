//! Argument parsing and subcommand dispatch.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bevtraj_core::model::Variant;
use clap::{Parser, Subcommand, ValueEnum};

use crate::ablate::run_ablation;
use crate::checkpoint::Checkpoint;
use crate::config::{Preset, RunConfig};
use crate::eval::{evaluate_checkpoint, write_report};
use crate::manifest::{build_dataset, Manifest, Split};
use crate::render::{load_prediction, render, write_ppm, RenderPrediction};
use crate::train::{fit, predict, RunDir, Trainer};
use crate::{sample_io, thread_pool};

#[derive(Debug, Parser)]
#[command(name = "bevtraj", version, about = "Multi-modal trajectory prediction on rasterized BEV scenes")]
pub struct Cli {
    /// TOML run config; unset keys take preset values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Preset supplying the defaults.
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the model variant (baseline, no-mode-queries,
    /// no-self-attention, no-recurrence, no-ego-reference).
    #[arg(long, global = true)]
    pub variant: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Eval,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Eval => Split::Eval,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate, rasterize and write samples plus a manifest.
    BuildDataset {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the train split; writes logs and checkpoints to --out.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Dataset manifest (default: config data.manifest, then <out>/manifest.jsonl).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint; writes a JSONL metric report to --out.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "eval")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and compare every model variant.
    Ablate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Draw a sample and predicted trajectories as a PPM image.
    Render {
        #[arg(long)]
        sample: PathBuf,
        /// Predict with this checkpoint.
        #[arg(long, conflicts_with = "prediction")]
        checkpoint: Option<PathBuf>,
        /// JSON file `{"modes": [[[x, y], ...], ...]}` in grid coordinates.
        #[arg(long)]
        prediction: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Cli {
    fn has_overrides(&self) -> bool {
        self.config.is_some() || self.preset.is_some() || self.seed.is_some() || self.variant.is_some()
    }

    /// The config file (or preset) with command-line overrides applied.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p, self.preset)?,
            None => RunConfig::preset(self.preset.unwrap_or(Preset::Desk)),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(v) = &self.variant {
            cfg.model.variant = Variant::from_name(v)?.name();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn manifest_path(explicit: Option<&Path>, cfg: &RunConfig, fallback: &Path) -> Result<PathBuf> {
    match explicit {
        Some(p) => Ok(p.to_path_buf()),
        None => crate::manifest::resolve(cfg, fallback),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let pool = thread_pool()?;
    match &cli.command {
        Command::BuildDataset { out } => {
            let cfg = cli.run_config()?;
            let path = build_dataset(&cfg, out)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml())?;
            println!("{}", path.display());
        }
        Command::Train { out, manifest, resume } => {
            let mut trainer = match resume {
                Some(ck_path) => {
                    let ck = Checkpoint::load(ck_path)?;
                    if cli.has_overrides() {
                        let want = cli.run_config()?.hash();
                        if want != ck.config_hash() {
                            bail!("config hash mismatch: checkpoint {} was trained with config {}, the given config hashes to {want}", ck_path.display(), ck.config_hash());
                        }
                    }
                    Trainer::from_checkpoint(ck)?
                }
                None => Trainer::new(&cli.run_config()?)?,
            };
            let path = manifest_path(manifest.as_deref(), &trainer.config, out)?;
            let m = Manifest::load(&path)?;
            let train = m.load_split(Split::Train)?;
            let held_out = m.load_split(Split::Eval)?;
            let dir = RunDir::new(out)?;
            std::fs::write(out.join("config.toml"), trainer.config.to_toml())?;
            let records = fit(&mut trainer, &train, &held_out, &dir, &pool)?;
            if let Some(last) = records.last() {
                println!("epoch {} loss {:.6}", last.epoch, last.loss);
            }
            println!("{}", dir.checkpoint().display());
        }
        Command::Eval { checkpoint, manifest, split, out } => {
            let ck = Checkpoint::load(checkpoint)?;
            let expected = if cli.has_overrides() { Some(cli.run_config()?) } else { None };
            let m = Manifest::load(manifest)?;
            let split = Split::from(*split);
            let samples = m.load_split(split)?;
            let tag = match split {
                Split::Train => "train",
                Split::Eval => "eval",
            };
            let records = evaluate_checkpoint(&ck, expected.as_ref(), &samples, tag, &pool)?;
            write_report(out, &records)?;
            for r in &records {
                println!("{}", serde_json::to_string(r)?);
            }
        }
        Command::Ablate { out, manifest } => {
            let cfg = cli.run_config()?;
            let path = manifest_path(manifest.as_deref(), &cfg, out)?;
            let m = Manifest::load(&path)?;
            let train = m.load_split(Split::Train)?;
            let held_out = m.load_split(Split::Eval)?;
            std::fs::create_dir_all(out)?;
            let report = run_ablation(&cfg, &Variant::NAMES, &train, &held_out, out, &pool);
            report.write(&out.join("ablation.jsonl"))?;
            for r in &report.rows {
                println!("{}", serde_json::to_string(r)?);
            }
            println!("{}", serde_json::to_string(&report.checks)?);
        }
        Command::Render { sample, checkpoint, prediction, out } => {
            let s = sample_io::read_sample(sample).with_context(|| format!("reading {}", sample.display()))?;
            let pred = if let Some(ck_path) = checkpoint {
                let ck = Checkpoint::load(ck_path)?;
                crate::eval::check_compatibility(&ck, None, std::slice::from_ref(&s))?;
                let trainer = Trainer::from_checkpoint(ck)?;
                let p = predict(&trainer.model, &trainer.params, std::slice::from_ref(&s), 1, &pool)?;
                RenderPrediction {
                    modes: (0..p.modes).map(|k| (0..p.steps).map(|t| p.waypoint(0, k, t)).collect()).collect(),
                    probabilities: p.pi.clone(),
                }
            } else if let Some(p) = prediction {
                load_prediction(p)?
            } else {
                RenderPrediction::default()
            };
            write_ppm(out, &render(&s, &pred))?;
        }
    }
    Ok(())
}
