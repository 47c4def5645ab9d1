//! Dataset manifest (one JSON record per line) and dataset building.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bevtraj_core::scene::{generate_scene, rasterize, RasterSample, SceneKind};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::sample_io;

pub const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    /// Sample file, relative to the manifest's directory.
    pub path: String,
    pub kind: String,
    pub seed: u64,
    pub split: Split,
}

impl ManifestRecord {
    pub fn scene_kind(&self) -> Result<SceneKind> {
        SceneKind::parse(&self.kind).with_context(|| format!("unknown scene kind {:?}", self.kind))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Directory the record paths are relative to.
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).with_context(|| format!("opening manifest {}", path.display()))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line).with_context(|| format!("{}:{}: bad record", path.display(), i + 1))?;
            rec.scene_kind()?;
            records.push(rec);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, records })
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn sample_path(&self, rec: &ManifestRecord) -> PathBuf {
        self.root.join(&rec.path)
    }

    /// Reads the samples of `split` in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<RasterSample>> {
        self.split(split)
            .par_iter()
            .map(|r| {
                let p = self.sample_path(r);
                sample_io::read_sample(&p).with_context(|| format!("reading sample {}", p.display()))
            })
            .collect()
    }
}

/// Splits `n` into per-kind counts proportional to `fractions` by the
/// largest-remainder rule (ties go to the earlier kind).
pub fn kind_counts(fractions: &[(SceneKind, f64)], n: usize) -> Vec<(SceneKind, usize)> {
    let exact: Vec<f64> = fractions.iter().map(|(_, f)| f * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    fractions.iter().map(|(k, _)| *k).zip(counts).collect()
}

/// Deterministic sample plan: kind and scene seed for every record.
pub fn plan(cfg: &RunConfig) -> Result<Vec<ManifestRecord>> {
    let fractions = cfg.kind_fractions()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::new();
    for (split, n) in [(Split::Train, cfg.data.train_samples), (Split::Eval, cfg.data.eval_samples)] {
        let mut kinds: Vec<SceneKind> = kind_counts(&fractions, n).into_iter().flat_map(|(k, c)| std::iter::repeat_n(k, c)).collect();
        kinds.shuffle(&mut rng);
        let tag = match split {
            Split::Train => "train",
            Split::Eval => "eval",
        };
        for (i, kind) in kinds.into_iter().enumerate() {
            records.push(ManifestRecord { path: format!("samples/{tag}_{i:05}.casp"), kind: kind.name().into(), seed: rng.random(), split });
        }
    }
    Ok(records)
}

/// Generates, rasterizes and writes every planned sample plus the manifest.
/// On failure the manifest is not left behind.
pub fn build_dataset(cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    let records = plan(cfg)?;
    let scene_cfg = cfg.scene_config();
    std::fs::create_dir_all(out_dir.join("samples")).with_context(|| format!("creating {}", out_dir.display()))?;
    let manifest_path = out_dir.join(MANIFEST_NAME);
    let tmp_path = out_dir.join(format!("{MANIFEST_NAME}.partial"));
    let result = (|| -> Result<()> {
        records.par_iter().try_for_each(|r| -> Result<()> {
            let sample = rasterize(&generate_scene(r.seed, r.scene_kind()?, &scene_cfg), &scene_cfg);
            let path = out_dir.join(&r.path);
            sample_io::write_sample(&path, &sample).with_context(|| format!("writing {}", path.display()))
        })?;
        let mut w = BufWriter::new(File::create(&tmp_path).with_context(|| format!("creating {}", tmp_path.display()))?);
        for r in &records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        std::fs::rename(&tmp_path, &manifest_path)?;
        Ok(())
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp_path);
        let _ = std::fs::remove_file(&manifest_path);
        return Err(e);
    }
    Ok(manifest_path)
}

/// Resolves the manifest a command should read: the config's `data.manifest`
/// if set, otherwise `manifest.jsonl` inside `fallback_dir`.
pub fn resolve(cfg: &RunConfig, fallback_dir: &Path) -> Result<PathBuf> {
    let path = match &cfg.data.manifest {
        Some(p) => PathBuf::from(p),
        None => fallback_dir.join(MANIFEST_NAME),
    };
    if !path.is_file() {
        bail!("manifest {} does not exist; run build-dataset first", path.display());
    }
    Ok(path)
}
