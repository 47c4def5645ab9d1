//! Ablation matrix: trains every model variant on the same data and compares
//! metrics and epoch time.

use std::io::Write;
use std::path::Path;

use anyhow::Result;
use bevtraj_core::metrics::{MetricTotals, PredictionSet};
use bevtraj_core::model::Variant;
use bevtraj_core::scene::{GridFrame, RasterSample, SceneSpec};
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::train::{fit, predict, read_jsonl, score, RunDir, TimingRecord, Trainer};

/// Outcome of training and evaluating one variant.
#[derive(Debug, Clone)]
pub struct VariantRun {
    pub trainer: Trainer,
    pub prediction: PredictionSet,
    pub totals: MetricTotals,
    pub avg_epoch_seconds: f64,
}

/// Trains `variant` of `base` from scratch in `dir` and evaluates it on
/// `held_out`.
pub fn train_variant(base: &RunConfig, variant: &str, train: &[RasterSample], held_out: &[RasterSample], dir: &Path, pool: &ThreadPool) -> Result<VariantRun> {
    let mut cfg = base.clone();
    cfg.model.variant = Variant::from_name(variant)?.name();
    let run_dir = RunDir::new(dir)?;
    let mut trainer = Trainer::new(&cfg)?;
    fit(&mut trainer, train, held_out, &run_dir, pool)?;
    let timings: Vec<TimingRecord> = read_jsonl(&run_dir.timing_log())?;
    let avg_epoch_seconds = timings.iter().map(|t| t.seconds).sum::<f64>() / timings.len().max(1) as f64;
    let prediction = predict(&trainer.model, &trainer.params, held_out, cfg.train.microbatch, pool)?;
    let totals = score(&prediction, held_out)?;
    Ok(VariantRun { trainer, prediction, totals, avg_epoch_seconds })
}

/// Distance within which a predicted endpoint counts as following a
/// corridor, meters.
pub const CORRIDOR_RADIUS: f64 = 3.0;

/// For every scene, the number of distinct corridors that some mode's
/// endpoint follows. An endpoint follows corridor `i` when it lies within
/// [`CORRIDOR_RADIUS`] of corridor `i` and farther than that from every
/// other corridor.
pub fn corridors_covered(pred: &PredictionSet, scenes: &[SceneSpec], frame: &GridFrame) -> Vec<usize> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, scene)| {
            let mut hit = vec![false; scene.corridors.len()];
            for k in 0..pred.modes {
                let end = frame.to_world(pred.waypoint(i, k, pred.steps - 1));
                let near: Vec<usize> = scene.corridors.iter().enumerate().filter(|(_, c)| c.distance(end) <= CORRIDOR_RADIUS).map(|(j, _)| j).collect();
                if let [j] = near[..] {
                    hit[j] = true;
                }
            }
            hit.iter().filter(|&&h| h).count()
        })
        .collect()
}

/// Fraction of scenes whose predicted modes follow at least two corridors.
pub fn multi_corridor_fraction(pred: &PredictionSet, scenes: &[SceneSpec], frame: &GridFrame) -> f64 {
    if scenes.is_empty() {
        return 0.0;
    }
    corridors_covered(pred, scenes, frame).iter().filter(|&&n| n >= 2).count() as f64 / scenes.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mode_queries: bool,
    pub self_attention: bool,
    pub recurrence: bool,
    pub ego_reference: bool,
    pub status: String,
    pub error: Option<String>,
    pub min_ade_5: Option<f64>,
    pub min_fde_1: Option<f64>,
    pub miss_rate_5: Option<f64>,
    pub offroad_rate: Option<f64>,
    pub avg_epoch_seconds: Option<f64>,
    pub config_hash: String,
}

/// Direction checks against the baseline; `None` when a side failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingChecks {
    pub no_mode_queries_higher_ade: Option<bool>,
    pub no_self_attention_faster: Option<bool>,
    pub no_self_attention_higher_ade: Option<bool>,
    pub no_recurrence_not_lower_ade: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub checks: OrderingChecks,
}

impl AblationReport {
    fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == name && r.status == "ok")
    }

    fn compare(&self, name: &str, f: impl Fn(&AblationRow, &AblationRow) -> Option<bool>) -> Option<bool> {
        f(self.row("baseline")?, self.row(name)?)
    }

    fn check(&mut self) {
        self.checks = OrderingChecks {
            no_mode_queries_higher_ade: self.compare("no-mode-queries", |b, v| Some(v.min_ade_5? > b.min_ade_5?)),
            no_self_attention_faster: self.compare("no-self-attention", |b, v| Some(v.avg_epoch_seconds? < b.avg_epoch_seconds?)),
            no_self_attention_higher_ade: self.compare("no-self-attention", |b, v| Some(v.min_ade_5? > b.min_ade_5?)),
            no_recurrence_not_lower_ade: self.compare("no-recurrence", |b, v| Some(v.min_ade_5? >= b.min_ade_5?)),
        };
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.rows {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        serde_json::to_writer(&mut out, &serde_json::json!({ "checks": self.checks }))?;
        out.write_all(b"\n")?;
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Trains every variant in `variants` under `out_dir/<variant>`. A variant
/// that fails is reported as such and the others still run.
pub fn run_ablation(base: &RunConfig, variants: &[&str], train: &[RasterSample], held_out: &[RasterSample], out_dir: &Path, pool: &ThreadPool) -> AblationReport {
    let mut rows = Vec::new();
    for &name in variants {
        log::info!("ablation: training {name}");
        let mut cfg = base.clone();
        cfg.model.variant = name.to_string();
        let flags = Variant::from_name(name).unwrap_or(Variant::BASELINE);
        let mut row = AblationRow {
            variant: name.to_string(),
            mode_queries: flags.mode_queries,
            self_attention: flags.self_attention,
            recurrence: flags.recurrence,
            ego_reference: flags.ego_reference,
            status: "ok".into(),
            error: None,
            min_ade_5: None,
            min_fde_1: None,
            miss_rate_5: None,
            offroad_rate: None,
            avg_epoch_seconds: None,
            config_hash: cfg.hash(),
        };
        match train_variant(base, name, train, held_out, &out_dir.join(name), pool) {
            Ok(run) => {
                row.min_ade_5 = Some(run.totals.min_ade());
                row.min_fde_1 = Some(run.totals.min_fde());
                row.miss_rate_5 = Some(run.totals.miss_rate());
                row.offroad_rate = Some(run.totals.offroad_rate());
                row.avg_epoch_seconds = Some(run.avg_epoch_seconds);
            }
            Err(e) => {
                log::warn!("ablation: {name} failed: {e:#}");
                row.status = "failed".into();
                row.error = Some(format!("{e:#}"));
            }
        }
        rows.push(row);
    }
    let mut report = AblationReport {
        rows,
        checks: OrderingChecks {
            no_mode_queries_higher_ade: None,
            no_self_attention_faster: None,
            no_self_attention_higher_ade: None,
            no_recurrence_not_lower_ade: None,
        },
    };
    report.check();
    report
}
