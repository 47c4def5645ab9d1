//! Training loop: seeded shuffling and augmentation, microbatched gradients,
//! AdamW updates, loss/timing/metric logs and checkpoints.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use bevtraj_core::metrics::{MetricKs, MetricTotals, PredictionSet};
use bevtraj_core::model::{Batch, Model};
use bevtraj_core::nn::ParamStore;
use bevtraj_core::objective::{total_loss, LossConfig};
use bevtraj_core::optim::AdamW;
use bevtraj_core::scene::{augment, RasterSample};
use bevtraj_core::tensor::{Diagnostics, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState};
use crate::config::RunConfig;

pub const LOSS_LOG: &str = "loss.jsonl";
pub const TIMING_LOG: &str = "timing.jsonl";
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const CHECKPOINT_NAME: &str = "checkpoint.ckpt";
pub const NAN_DUMP: &str = "nan_dump.json";

/// Stream of the training RNG; the model initialization uses the seed
/// directly, so shuffling and augmentation draw from a separate stream.
const TRAIN_STREAM: u64 = 1;

/// One line of the loss log. Contains no wall-clock values, so fixed-seed
/// runs produce identical logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub loss: f64,
    pub regression: f64,
    pub classification: f64,
    pub ref_point_clamps: usize,
    pub log_prob_clamps: usize,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub epoch: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub epoch: usize,
    pub split: String,
    pub min_ade_5: f64,
    pub min_fde_1: f64,
    pub miss_rate_5: f64,
    pub offroad_rate: f64,
    pub n_samples: usize,
}

/// Loss terms of one optimizer step, averaged over its batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub regression: f64,
    pub classification: f64,
    pub diagnostics: Diagnostics,
}

/// A batch produced a non-finite loss or gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("non-finite loss or gradient at epoch {epoch}, batch {batch} (samples {sample_indices:?}); training aborted")]
pub struct NonFinite {
    pub epoch: usize,
    pub batch: usize,
    pub sample_indices: Vec<usize>,
    /// Training RNG position at the start of the batch; restoring it
    /// reproduces the batch's augmentation.
    pub rng: RngState,
    pub loss: f64,
    pub regression: f64,
    pub classification: f64,
}

struct ChunkGrad {
    grads: Vec<Tensor<f32>>,
    stats: StepStats,
}

fn chunk_gradients(model: &Model, params: &ParamStore<f32>, samples: &[&RasterSample], loss_cfg: &LossConfig) -> Result<ChunkGrad> {
    let batch = Batch::<f32>::from_samples(samples)?;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let pred = model.forward(&mut tape, &p, &batch)?;
    let gt = tape.constant(batch.gt.clone());
    let terms = total_loss(&mut tape, pred.mu, pred.b, pred.pi, gt, loss_cfg)?;
    let value = |v| tape.value(v).data()[0] as f64;
    let stats = StepStats {
        loss: value(terms.total),
        regression: value(terms.regression),
        classification: value(terms.classification),
        diagnostics: tape.diagnostics(),
    };
    let mut grads = tape.backward(terms.total)?;
    Ok(ChunkGrad { grads: params.collect_grads(&p, &mut grads), stats })
}

/// Batch-mean loss gradient. Microbatches run on `pool` and their results
/// are combined in a fixed order with weights `len(chunk) / len(batch)`, so
/// the result does not depend on the worker count.
pub fn batch_gradients(
    model: &Model,
    params: &ParamStore<f32>,
    samples: &[&RasterSample],
    microbatch: usize,
    loss_cfg: &LossConfig,
    pool: &ThreadPool,
) -> Result<(Vec<Tensor<f32>>, StepStats)> {
    let chunks: Vec<&[&RasterSample]> = samples.chunks(microbatch.max(1)).collect();
    let parts: Vec<ChunkGrad> = pool.install(|| chunks.par_iter().map(|c| chunk_gradients(model, params, c, loss_cfg)).collect::<Result<_>>())?;
    let n = samples.len() as f64;
    let mut acc: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    let mut stats = StepStats::default();
    for (chunk, part) in chunks.iter().zip(&parts) {
        let w = chunk.len() as f64 / n;
        for (a, g) in acc.iter_mut().zip(&part.grads) {
            for (a, &g) in a.iter_mut().zip(g.data()) {
                *a += w * g as f64;
            }
        }
        stats.loss += w * part.stats.loss;
        stats.regression += w * part.stats.regression;
        stats.classification += w * part.stats.classification;
        stats.diagnostics.domain_clamps += part.stats.diagnostics.domain_clamps;
        stats.diagnostics.ref_point_clamps += part.stats.diagnostics.ref_point_clamps;
        stats.diagnostics.log_prob_clamps += part.stats.diagnostics.log_prob_clamps;
    }
    let grads = acc
        .into_iter()
        .zip(params.tensors())
        .map(|(a, t)| Tensor::from_vec(t.shape().to_vec(), a.into_iter().map(|v| v as f32).collect()))
        .collect::<Result<_, _>>()?;
    Ok((grads, stats))
}

/// Predictions for `samples` in order, computed in parallel chunks.
pub fn predict(model: &Model, params: &ParamStore<f32>, samples: &[RasterSample], chunk: usize, pool: &ThreadPool) -> Result<PredictionSet> {
    let cfg = &model.config;
    let chunks: Vec<&[RasterSample]> = samples.chunks(chunk.max(1)).collect();
    let parts: Vec<(Vec<f64>, Vec<f64>)> = pool.install(|| {
        chunks
            .par_iter()
            .map(|c| -> Result<_> {
                let refs: Vec<&RasterSample> = c.iter().collect();
                let batch = Batch::<f32>::from_samples(&refs)?;
                let mut tape = Tape::new();
                let p = params.bind(&mut tape);
                let pred = model.forward(&mut tape, &p, &batch)?;
                let mu = tape.value(pred.mu).data().iter().map(|&v| v as f64).collect();
                let pi = tape.value(pred.pi).data().iter().map(|&v| v as f64).collect();
                Ok((mu, pi))
            })
            .collect::<Result<_>>()
    })?;
    let (mut mu, mut pi) = (Vec::new(), Vec::new());
    for (m, p) in parts {
        mu.extend(m);
        pi.extend(p);
    }
    Ok(PredictionSet::new(samples.len(), cfg.modes, cfg.t_out, mu, pi)?)
}

/// minADE₅, minFDE₁, MR₅ and off-road rate of `pred` against `samples`.
pub fn score(pred: &PredictionSet, samples: &[RasterSample]) -> Result<MetricTotals> {
    let mut totals = MetricTotals::default();
    let Some(first) = samples.first() else {
        return Ok(totals);
    };
    let gt: Vec<[f64; 2]> = samples.iter().flat_map(|s| s.gt.iter().map(|p| [p[0] as f64, p[1] as f64])).collect();
    let masks: Vec<u8> = samples.iter().flat_map(|s| s.drivable_mask.iter().copied()).collect();
    let ks = MetricKs { ade: 5.min(pred.modes), fde: 1, miss: 5.min(pred.modes) };
    totals.add_batch(pred, &gt, &masks, first.height, first.width, first.resolution as f64, ks)?;
    Ok(totals)
}

pub fn evaluate(model: &Model, params: &ParamStore<f32>, samples: &[RasterSample], chunk: usize, pool: &ThreadPool) -> Result<MetricTotals> {
    if samples.is_empty() {
        return Ok(MetricTotals::default());
    }
    score(&predict(model, params, samples, chunk, pool)?, samples)
}

/// Model, parameters, optimizer state and training RNG.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub params: ParamStore<f32>,
    pub optimizer: AdamW<f32>,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let (model, params) = Model::new::<f32>(&config.model_config()?, config.seed)?;
        let optimizer = AdamW::new(config.optimizer(), &params);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Self { config: config.clone(), model, params, optimizer, rng, epoch: 0 })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let (model, fresh) = Model::new::<f32>(&ck.config.model_config()?, ck.config.seed)?;
        let matches = fresh.len() == ck.params.len()
            && fresh.ids().zip(ck.params.ids()).all(|(a, b)| fresh.name(a) == ck.params.name(b) && fresh.get(a).shape() == ck.params.get(b).shape());
        if !matches {
            bail!("checkpoint parameters do not match the model built from its config");
        }
        Ok(Self { rng: ck.rng.restore()?, config: ck.config, model, params: ck.params, optimizer: ck.optimizer, epoch: ck.epoch })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            epoch: self.epoch,
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    /// One AdamW update on `samples` as given (no augmentation).
    pub fn step(&mut self, samples: &[&RasterSample], pool: &ThreadPool) -> Result<StepStats> {
        let (grads, stats) = batch_gradients(&self.model, &self.params, samples, self.config.train.microbatch, &self.config.loss(), pool)?;
        if !stats.loss.is_finite() || !grads.iter().all(Tensor::is_finite) {
            bail!("non-finite loss {}", stats.loss);
        }
        self.optimizer.update(&mut self.params, &grads)?;
        Ok(stats)
    }

    /// One pass over `data`: seeded shuffle, per-sample augmentation (drawn
    /// sequentially from the training RNG), then one update per batch.
    pub fn train_epoch(&mut self, data: &[RasterSample], pool: &ThreadPool) -> Result<EpochRecord> {
        if data.is_empty() {
            bail!("training split is empty");
        }
        let train = self.config.train.clone();
        let loss_cfg = self.config.loss();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sums = StepStats::default();
        let mut steps = 0u64;
        for (b, idx) in order.chunks(train.batch_size).enumerate() {
            let rng_at_start = RngState::capture(&self.rng);
            let augmented: Vec<RasterSample> = if train.augment {
                idx.iter().map(|&i| augment(&data[i], &mut self.rng)).collect()
            } else {
                idx.iter().map(|&i| data[i].clone()).collect()
            };
            let refs: Vec<&RasterSample> = augmented.iter().collect();
            let (grads, stats) = batch_gradients(&self.model, &self.params, &refs, train.microbatch, &loss_cfg, pool)?;
            if !stats.loss.is_finite() || !grads.iter().all(Tensor::is_finite) {
                return Err(NonFinite {
                    epoch: self.epoch + 1,
                    batch: b,
                    sample_indices: idx.to_vec(),
                    rng: rng_at_start,
                    loss: stats.loss,
                    regression: stats.regression,
                    classification: stats.classification,
                }
                .into());
            }
            self.optimizer.update(&mut self.params, &grads)?;
            let w = idx.len() as f64;
            sums.loss += w * stats.loss;
            sums.regression += w * stats.regression;
            sums.classification += w * stats.classification;
            sums.diagnostics.ref_point_clamps += stats.diagnostics.ref_point_clamps;
            sums.diagnostics.log_prob_clamps += stats.diagnostics.log_prob_clamps;
            steps += 1;
        }
        self.epoch += 1;
        log::debug!("epoch {} finished after {steps} updates", self.epoch);
        let n = data.len() as f64;
        Ok(EpochRecord {
            epoch: self.epoch,
            steps: self.optimizer.step,
            loss: sums.loss / n,
            regression: sums.regression / n,
            classification: sums.classification / n,
            ref_point_clamps: sums.diagnostics.ref_point_clamps,
            log_prob_clamps: sums.diagnostics.log_prob_clamps,
            config_hash: self.config.hash(),
        })
    }
}

fn append_jsonl<R: Serialize>(path: &Path, record: &R) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    f.write_all(&line)?;
    Ok(())
}

/// Keeps only the records of `path` whose `epoch` field is at most `epoch`.
fn truncate_log(path: &Path, epoch: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let v: serde_json::Value = serde_json::from_str(&line).with_context(|| format!("bad line in {}", path.display()))?;
        if v.get("epoch").and_then(serde_json::Value::as_u64).is_some_and(|e| e as usize <= epoch) {
            kept.push(line);
        }
    }
    let mut text = kept.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_jsonl<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    BufReader::new(f).lines().map(|l| Ok(serde_json::from_str(&l?)?)).collect()
}

/// Paths written by [`fit`].
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn loss_log(&self) -> PathBuf {
        self.root.join(LOSS_LOG)
    }

    pub fn timing_log(&self) -> PathBuf {
        self.root.join(TIMING_LOG)
    }

    pub fn metrics_log(&self) -> PathBuf {
        self.root.join(METRICS_LOG)
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join(CHECKPOINT_NAME)
    }

    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.root.join(format!("epoch-{epoch:04}.ckpt"))
    }
}

/// Trains until `config.train.epochs` epochs are complete, logging each
/// epoch and checkpointing. A resumed trainer first drops log records of
/// epochs after its checkpoint, so the logs of an interrupted-and-resumed
/// run match an uninterrupted one.
pub fn fit(trainer: &mut Trainer, train: &[RasterSample], held_out: &[RasterSample], dir: &RunDir, pool: &ThreadPool) -> Result<Vec<EpochRecord>> {
    if trainer.epoch == 0 {
        for p in [dir.loss_log(), dir.timing_log(), dir.metrics_log()] {
            if p.exists() {
                std::fs::remove_file(&p)?;
            }
        }
    } else {
        for p in [dir.loss_log(), dir.timing_log(), dir.metrics_log()] {
            truncate_log(&p, trainer.epoch)?;
        }
    }
    let cfg = trainer.config.train.clone();
    let mut records = Vec::new();
    while trainer.epoch < cfg.epochs {
        let start = Instant::now();
        let record = match trainer.train_epoch(train, pool) {
            Ok(r) => r,
            Err(e) => {
                if let Some(nf) = e.downcast_ref::<NonFinite>() {
                    std::fs::write(dir.root.join(NAN_DUMP), serde_json::to_vec_pretty(nf)?)?;
                }
                return Err(e);
            }
        };
        let seconds = start.elapsed().as_secs_f64();
        log::info!("epoch {} loss {:.4} ({seconds:.1}s)", record.epoch, record.loss);
        append_jsonl(&dir.loss_log(), &record)?;
        append_jsonl(&dir.timing_log(), &TimingRecord { epoch: record.epoch, seconds })?;
        let e = trainer.epoch;
        if cfg.eval_every > 0 && (e % cfg.eval_every == 0 || e == cfg.epochs) && !held_out.is_empty() {
            let m = evaluate(&trainer.model, &trainer.params, held_out, cfg.microbatch, pool)?;
            append_jsonl(
                &dir.metrics_log(),
                &MetricSnapshot {
                    epoch: e,
                    split: "eval".into(),
                    min_ade_5: m.min_ade(),
                    min_fde_1: m.min_fde(),
                    miss_rate_5: m.miss_rate(),
                    offroad_rate: m.offroad_rate(),
                    n_samples: m.samples,
                },
            )?;
        }
        if cfg.checkpoint_every > 0 && e % cfg.checkpoint_every == 0 {
            trainer.checkpoint().save(&dir.epoch_checkpoint(e))?;
        }
        records.push(record);
    }
    trainer.checkpoint().save(&dir.checkpoint())?;
    Ok(records)
}
