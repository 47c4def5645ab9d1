//! Evaluation of a checkpoint on a manifest split.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Result};
use bevtraj_core::metrics::MetricTotals;
use bevtraj_core::scene::RasterSample;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::train::{evaluate, Trainer};

/// One line of a metric report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRecord {
    pub metric: String,
    pub k: Option<usize>,
    pub value: f64,
    pub n_samples: usize,
    pub split: String,
    pub config_hash: String,
}

pub fn report_records(totals: &MetricTotals, modes: usize, split: &str, config_hash: &str) -> Vec<ReportRecord> {
    let rec = |metric: &str, k: Option<usize>, value: f64| ReportRecord {
        metric: metric.into(),
        k,
        value,
        n_samples: totals.samples,
        split: split.into(),
        config_hash: config_hash.into(),
    };
    vec![
        rec("min_ade", Some(5.min(modes)), totals.min_ade()),
        rec("min_fde", Some(1), totals.min_fde()),
        rec("miss_rate", Some(5.min(modes)), totals.miss_rate()),
        rec("offroad_rate", None, totals.offroad_rate()),
    ]
}

/// Refuses a checkpoint trained under a different config, or whose grid and
/// horizon differ from the samples'.
pub fn check_compatibility(ck: &Checkpoint, expected: Option<&RunConfig>, samples: &[RasterSample]) -> Result<()> {
    let hash = ck.config_hash();
    if let Some(cfg) = expected {
        let want = cfg.hash();
        if want != hash {
            bail!(
                "config hash mismatch: the checkpoint was trained with config {hash}, but the supplied config hashes to {want}; \
                 evaluate without --config or pass the config the checkpoint was trained with"
            );
        }
    }
    let g = &ck.config.grid;
    for (i, s) in samples.iter().enumerate() {
        if (s.height, s.width, s.t_in, s.t_out) != (g.height, g.width, g.t_in, g.t_out) || s.resolution as f64 != g.resolution as f32 as f64 {
            bail!(
                "sample {i} has grid {}x{} (T_i {}, T_o {}, {} m/cell) but the checkpoint expects {}x{} (T_i {}, T_o {}, {} m/cell)",
                s.height,
                s.width,
                s.t_in,
                s.t_out,
                s.resolution,
                g.height,
                g.width,
                g.t_in,
                g.t_out,
                g.resolution
            );
        }
    }
    Ok(())
}

/// Checks compatibility, then scores the checkpoint on `samples`.
pub fn evaluate_checkpoint(ck: &Checkpoint, expected: Option<&RunConfig>, samples: &[RasterSample], split: &str, pool: &ThreadPool) -> Result<Vec<ReportRecord>> {
    check_compatibility(ck, expected, samples)?;
    let trainer = Trainer::from_checkpoint(ck.clone())?;
    let totals = evaluate(&trainer.model, &trainer.params, samples, ck.config.train.microbatch, pool)?;
    Ok(report_records(&totals, ck.config.model.modes, split, &ck.config_hash()))
}

pub fn write_report(path: &Path, records: &[ReportRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    std::fs::write(path, out)?;
    Ok(())
}
