//! Evaluation metrics over multi-modal predictions. Distances are reported
//! in meters (grid cells times resolution).

use alloc::format;
use alloc::vec::Vec;

use libm::{floor, sqrt};

use crate::{Error, Result};

/// Miss threshold in meters.
pub const MISS_THRESHOLD: f64 = 2.0;

/// Predictions for `B` samples in grid coordinates, as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub batch: usize,
    pub modes: usize,
    pub steps: usize,
    /// `[B, M, T, 2]`.
    pub mu: Vec<f64>,
    /// `[B, M]`.
    pub pi: Vec<f64>,
}

impl PredictionSet {
    pub fn new(batch: usize, modes: usize, steps: usize, mu: Vec<f64>, pi: Vec<f64>) -> Result<Self> {
        if mu.len() != batch * modes * steps * 2 || pi.len() != batch * modes {
            return Err(Error::Input(format!("prediction buffers do not match {batch} x {modes} x {steps}")));
        }
        Ok(Self { batch, modes, steps, mu, pi })
    }

    pub fn waypoint(&self, i: usize, k: usize, t: usize) -> [f64; 2] {
        let a = ((i * self.modes + k) * self.steps + t) * 2;
        [self.mu[a], self.mu[a + 1]]
    }

    /// Modes of sample `i` ordered by descending probability, ties by index.
    pub fn ranked_modes(&self, i: usize) -> Vec<usize> {
        let p = &self.pi[i * self.modes..(i + 1) * self.modes];
        let mut idx: Vec<usize> = (0..self.modes).collect();
        idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
        idx
    }

    fn top_k(&self, i: usize, k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > self.modes {
            return Err(Error::Input(format!("k = {k} must lie in 1..={}", self.modes)));
        }
        let mut r = self.ranked_modes(i);
        r.truncate(k);
        Ok(r)
    }

    /// Per-waypoint distances in meters of mode `k` of sample `i`.
    fn distances(&self, i: usize, k: usize, gt: &[[f64; 2]], resolution: f64) -> impl Iterator<Item = f64> + '_ {
        let gt = gt[i * self.steps..(i + 1) * self.steps].to_vec();
        (0..self.steps).map(move |t| {
            let p = self.waypoint(i, k, t);
            let (dx, dy) = (p[0] - gt[t][0], p[1] - gt[t][1]);
            sqrt(dx * dx + dy * dy) * resolution
        })
    }

    fn check_gt(&self, gt: &[[f64; 2]]) -> Result<()> {
        if gt.len() != self.batch * self.steps {
            return Err(Error::Input(format!("ground truth has {} points, expected {}", gt.len(), self.batch * self.steps)));
        }
        Ok(())
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Per-sample minimum over the top-`k` modes of the mean displacement.
pub fn ade_per_sample(pred: &PredictionSet, gt: &[[f64; 2]], k: usize, resolution: f64) -> Result<Vec<f64>> {
    pred.check_gt(gt)?;
    (0..pred.batch)
        .map(|i| {
            Ok(pred.top_k(i, k)?.into_iter().map(|m| pred.distances(i, m, gt, resolution).sum::<f64>() / pred.steps as f64).fold(f64::INFINITY, f64::min))
        })
        .collect()
}

/// Per-sample minimum over the top-`k` modes of the final displacement.
pub fn fde_per_sample(pred: &PredictionSet, gt: &[[f64; 2]], k: usize, resolution: f64) -> Result<Vec<f64>> {
    pred.check_gt(gt)?;
    (0..pred.batch)
        .map(|i| Ok(pred.top_k(i, k)?.into_iter().map(|m| pred.distances(i, m, gt, resolution).last().unwrap_or(0.0)).fold(f64::INFINITY, f64::min)))
        .collect()
}

/// Per-sample miss indicator: 1 when every top-`k` mode deviates by more
/// than 2 m at some step.
pub fn miss_per_sample(pred: &PredictionSet, gt: &[[f64; 2]], k: usize, resolution: f64) -> Result<Vec<f64>> {
    pred.check_gt(gt)?;
    (0..pred.batch)
        .map(|i| {
            let best = pred.top_k(i, k)?.into_iter().map(|m| pred.distances(i, m, gt, resolution).fold(0.0, f64::max)).fold(f64::INFINITY, f64::min);
            Ok(if best > MISS_THRESHOLD { 1.0 } else { 0.0 })
        })
        .collect()
}

/// Per-sample fraction of the `M` trajectories with any waypoint whose cell
/// is off the drivable mask or outside the grid. `masks` holds `B` planes of
/// `height * width`.
pub fn offroad_per_sample(pred: &PredictionSet, masks: &[u8], height: usize, width: usize) -> Result<Vec<f64>> {
    if masks.len() != pred.batch * height * width {
        return Err(Error::Input(format!("mask buffer has {} cells, expected {}", masks.len(), pred.batch * height * width)));
    }
    Ok((0..pred.batch)
        .map(|i| {
            let mask = &masks[i * height * width..(i + 1) * height * width];
            let off = (0..pred.modes)
                .filter(|&k| {
                    (0..pred.steps).any(|t| {
                        let p = pred.waypoint(i, k, t);
                        let (c, r) = (floor(p[0]), floor(p[1]));
                        !(c >= 0.0 && r >= 0.0 && (c as usize) < width && (r as usize) < height && mask[r as usize * width + c as usize] == 1)
                    })
                })
                .count();
            off as f64 / pred.modes as f64
        })
        .collect())
}

pub fn min_ade(pred: &PredictionSet, gt: &[[f64; 2]], k: usize, resolution: f64) -> Result<f64> {
    Ok(mean(&ade_per_sample(pred, gt, k, resolution)?))
}

pub fn min_fde(pred: &PredictionSet, gt: &[[f64; 2]], k: usize, resolution: f64) -> Result<f64> {
    Ok(mean(&fde_per_sample(pred, gt, k, resolution)?))
}

pub fn miss_rate(pred: &PredictionSet, gt: &[[f64; 2]], k: usize, resolution: f64) -> Result<f64> {
    Ok(mean(&miss_per_sample(pred, gt, k, resolution)?))
}

pub fn offroad_rate(pred: &PredictionSet, masks: &[u8], height: usize, width: usize) -> Result<f64> {
    Ok(mean(&offroad_per_sample(pred, masks, height, width)?))
}

/// Running sums of the four reported metrics; merging accumulators equals
/// evaluating the concatenated samples.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricTotals {
    pub min_ade_sum: f64,
    pub min_fde_sum: f64,
    pub miss_sum: f64,
    pub offroad_sum: f64,
    pub samples: usize,
}

/// Top-k settings of the reported metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricKs {
    pub ade: usize,
    pub fde: usize,
    pub miss: usize,
}

impl Default for MetricKs {
    fn default() -> Self {
        Self { ade: 5, fde: 1, miss: 5 }
    }
}

impl MetricTotals {
    pub fn add_batch(&mut self, pred: &PredictionSet, gt: &[[f64; 2]], masks: &[u8], height: usize, width: usize, resolution: f64, ks: MetricKs) -> Result<()> {
        self.min_ade_sum += ade_per_sample(pred, gt, ks.ade, resolution)?.iter().sum::<f64>();
        self.min_fde_sum += fde_per_sample(pred, gt, ks.fde, resolution)?.iter().sum::<f64>();
        self.miss_sum += miss_per_sample(pred, gt, ks.miss, resolution)?.iter().sum::<f64>();
        self.offroad_sum += offroad_per_sample(pred, masks, height, width)?.iter().sum::<f64>();
        self.samples += pred.batch;
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        self.min_ade_sum += other.min_ade_sum;
        self.min_fde_sum += other.min_fde_sum;
        self.miss_sum += other.miss_sum;
        self.offroad_sum += other.offroad_sum;
        self.samples += other.samples;
    }

    fn avg(&self, s: f64) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            s / self.samples as f64
        }
    }

    pub fn min_ade(&self) -> f64 {
        self.avg(self.min_ade_sum)
    }

    pub fn min_fde(&self) -> f64 {
        self.avg(self.min_fde_sum)
    }

    pub fn miss_rate(&self) -> f64 {
        self.avg(self.miss_sum)
    }

    pub fn offroad_rate(&self) -> f64 {
        self.avg(self.offroad_sum)
    }
}
