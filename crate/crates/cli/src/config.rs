//! Run configuration: TOML on disk, closed-world schema, content hash.
//!
//! A config file may set any subset of keys. Missing keys take the values of
//! the selected preset (`desk` unless the file or the command line says
//! otherwise); unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use bevtraj_core::model::{ModelConfig, Variant};
use bevtraj_core::objective::LossConfig;
use bevtraj_core::optim::AdamWConfig;
use bevtraj_core::scene::{GridFrame, SceneConfig, SceneKind, F_D, F_S};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub height: usize,
    pub width: usize,
    pub resolution: f64,
    pub ego_row: usize,
    pub ego_col: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub dt: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub max_lateral_accel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_samples: usize,
    pub eval_samples: usize,
    /// Relative frequency of each scene kind.
    pub kinds: BTreeMap<String, f64>,
    /// Manifest to train/evaluate on; when unset, commands that need data
    /// look for `manifest.jsonl` in their output directory.
    pub manifest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    pub strides: Vec<usize>,
    pub gru_hidden: usize,
    pub heads: usize,
    pub points: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_hidden: usize,
    pub modes: usize,
    pub recurrent_steps: usize,
    pub chunk: usize,
    pub offset_scale: f64,
    pub variant: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Samples per gradient work unit; gradients of the units are summed in
    /// a fixed order, so results do not depend on the worker count.
    pub microbatch: usize,
    pub epochs: usize,
    pub augment: bool,
    pub normalize_targets: bool,
    /// Held-out metric snapshot every this many epochs (0 = never).
    pub eval_every: usize,
    /// Checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub grid: GridConfig,
    pub data: DataConfig,
    pub model: ModelSection,
    pub optim: OptimConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (scene, model) = match preset {
            Preset::Desk => (SceneConfig::desk(), ModelConfig::desk()),
            Preset::Paper => (SceneConfig::paper(), ModelConfig::paper()),
        };
        let g = scene.grid;
        let opt = AdamWConfig::default();
        let (train_samples, eval_samples, batch_size) = match preset {
            Preset::Desk => (200, 50, 16),
            Preset::Paper => (2000, 500, 64),
        };
        Self {
            preset,
            seed: 0,
            grid: GridConfig {
                height: g.height,
                width: g.width,
                resolution: g.resolution,
                ego_row: g.ego_row,
                ego_col: g.ego_col,
                t_in: scene.t_in,
                t_out: scene.t_out,
                dt: scene.dt,
                speed_min: scene.speed_min,
                speed_max: scene.speed_max,
                max_lateral_accel: scene.max_lateral_accel,
            },
            data: DataConfig {
                train_samples,
                eval_samples,
                kinds: SceneKind::ALL.iter().map(|k| (k.name().to_string(), 1.0)).collect(),
                manifest: None,
            },
            model: ModelSection {
                d: model.d,
                strides: model.strides.clone(),
                gru_hidden: model.gru_hidden,
                heads: model.heads,
                points: model.points,
                encoder_layers: model.encoder_layers,
                decoder_layers: model.decoder_layers,
                ffn_hidden: model.ffn_hidden,
                modes: model.modes,
                recurrent_steps: model.recurrent_steps,
                chunk: model.chunk,
                offset_scale: model.offset_scale,
                variant: model.variant.name(),
            },
            optim: OptimConfig { lr: opt.lr, beta1: opt.beta1, beta2: opt.beta2, eps: opt.eps, weight_decay: opt.weight_decay },
            train: TrainConfig {
                batch_size,
                microbatch: 4,
                epochs: 20,
                augment: true,
                normalize_targets: true,
                eval_every: 5,
                checkpoint_every: 0,
            },
        }
    }

    /// Parses TOML text over the defaults of `preset_override`, or of the
    /// file's own `preset` key, or of the desk preset.
    pub fn from_toml(text: &str, preset_override: Option<Preset>) -> Result<Self> {
        let file: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
        let preset = match preset_override {
            Some(p) => p,
            None => match file.get("preset") {
                Some(v) => Preset::deserialize(v.clone()).context("invalid preset")?,
                None => Preset::Desk,
            },
        };
        let mut merged = toml::Table::try_from(Self::preset(preset)).expect("config serializes to a table");
        merge(&mut merged, file);
        merged.insert("preset".into(), toml::Value::String(preset_name(preset).into()));
        let cfg: Self = toml::Value::Table(merged).try_into().context("config does not match the schema")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset_override: Option<Preset>) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text, preset_override).with_context(|| format!("in config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 over the canonical JSON serialization, hex encoded.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn variant(&self) -> Result<Variant> {
        Ok(Variant::from_name(&self.model.variant)?)
    }

    pub fn scene_config(&self) -> SceneConfig {
        let g = &self.grid;
        SceneConfig {
            grid: GridFrame { height: g.height, width: g.width, resolution: g.resolution, ego_row: g.ego_row, ego_col: g.ego_col },
            t_in: g.t_in,
            t_out: g.t_out,
            dt: g.dt,
            speed_min: g.speed_min,
            speed_max: g.speed_max,
            max_lateral_accel: g.max_lateral_accel,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        Ok(ModelConfig {
            height: self.grid.height,
            width: self.grid.width,
            t_in: self.grid.t_in,
            t_out: self.grid.t_out,
            static_channels: F_S,
            dynamic_channels: F_D,
            d: m.d,
            strides: m.strides.clone(),
            gru_hidden: m.gru_hidden,
            heads: m.heads,
            points: m.points,
            encoder_layers: m.encoder_layers,
            decoder_layers: m.decoder_layers,
            ffn_hidden: m.ffn_hidden,
            modes: m.modes,
            recurrent_steps: m.recurrent_steps,
            chunk: m.chunk,
            offset_scale: m.offset_scale,
            variant: self.variant()?,
        })
    }

    pub fn optimizer(&self) -> AdamWConfig {
        let o = &self.optim;
        AdamWConfig { lr: o.lr, beta1: o.beta1, beta2: o.beta2, eps: o.eps, weight_decay: o.weight_decay }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig { normalize_targets: self.train.normalize_targets }
    }

    /// Scene kinds with their normalized fractions, in canonical order.
    pub fn kind_fractions(&self) -> Result<Vec<(SceneKind, f64)>> {
        let mut out = Vec::new();
        for (name, &w) in &self.data.kinds {
            let kind = SceneKind::parse(name).with_context(|| format!("unknown scene kind {name:?}"))?;
            if !(w >= 0.0 && w.is_finite()) {
                bail!("scene kind {name:?} has invalid weight {w}");
            }
            out.push((kind, w));
        }
        let total: f64 = out.iter().map(|(_, w)| w).sum();
        if total <= 0.0 {
            bail!("scene kind weights must not all be zero");
        }
        out.sort_by_key(|(k, _)| SceneKind::ALL.iter().position(|a| a == k));
        Ok(out.into_iter().map(|(k, w)| (k, w / total)).collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?.validate()?;
        self.kind_fractions()?;
        let g = &self.grid;
        if g.ego_row >= g.height || g.ego_col >= g.width {
            bail!("ego anchor ({}, {}) outside the {}x{} grid", g.ego_row, g.ego_col, g.height, g.width);
        }
        if !(g.resolution > 0.0) {
            bail!("grid resolution must be positive");
        }
        if self.train.batch_size == 0 || self.train.microbatch == 0 {
            bail!("batch_size and microbatch must be positive");
        }
        // config files are TOML, whose integers are signed 64-bit
        if i64::try_from(self.seed).is_err() {
            bail!("seed {} exceeds the largest TOML integer ({})", self.seed, i64::MAX);
        }
        Ok(())
    }
}

fn preset_name(p: Preset) -> &'static str {
    match p {
        Preset::Desk => "desk",
        Preset::Paper => "paper",
    }
}

/// Recursively overlays `over` onto `base`. Keys absent from `base` are kept
/// so that schema validation reports them.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if k != "kinds" => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_the_desk_preset() {
        let c = RunConfig::from_toml("", None).unwrap();
        assert_eq!(c, RunConfig::preset(Preset::Desk));
        assert_eq!(c.model_config().unwrap(), ModelConfig::desk());
    }

    #[test]
    fn overrides_and_preset_selection() {
        let c = RunConfig::from_toml("seed = 9\n[model]\nvariant = \"no-recurrence\"\n", Some(Preset::Paper)).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.grid.height, 152);
        assert!(!c.variant().unwrap().recurrence);
        let c = RunConfig::from_toml("preset = \"paper\"", None).unwrap();
        assert_eq!(c.preset, Preset::Paper);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::from_toml("colour = 3", None).is_err());
        assert!(RunConfig::from_toml("[model]\nwidth = 3", None).is_err());
        assert!(RunConfig::from_toml("[model]\nvariant = \"no-backbone\"", None).is_err());
        assert!(RunConfig::from_toml("[data.kinds]\nroundabout = 1.0", None).is_err());
        assert!(RunConfig::from_toml("[model]\nchunk = 5", None).is_err());
    }

    #[test]
    fn kinds_table_replaces_the_default_mix() {
        let c = RunConfig::from_toml("[data.kinds]\nfork = 1.0\nstraight = 1.0", None).unwrap();
        assert_eq!(c.kind_fractions().unwrap(), vec![(SceneKind::Straight, 0.5), (SceneKind::Fork, 0.5)]);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::preset(Preset::Desk);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        b.train.epochs += 1;
        assert_ne!(a.hash(), b.hash());
        let back = RunConfig::from_toml(&a.to_toml(), None).unwrap();
        assert_eq!(back.hash(), a.hash());
    }
}
