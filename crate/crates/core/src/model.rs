//! The full predictor: backbone, optional deformable self-attention fusion,
//! and the recurrent deformable cross-attention decoder.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{flatten_levels, positional_embedding, CrossAttnStack, DeformAttnConfig, FusionEncoder, ProjectedValues};
use crate::backbone::{Backbone, BackboneConfig};
use crate::nn::{Bound, Init, Linear, Mlp, ParamId, ParamStore};
use crate::scene::{RasterSample, F_D, F_S};
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// Lower bound added to the softplus of the Laplace scale head.
pub const SCALE_EPSILON: f64 = 1e-3;

/// Fixed per-channel divisors applied to the dynamic rasters when a batch is
/// built (velocity, acceleration, sub-cell offset, extent, heading).
pub const DYNAMIC_SCALE: [f64; F_D] = [10.0, 10.0, 2.0, 2.0, 1.0, 1.0, 5.0, 2.0, PI];

/// Which architectural components are enabled; every ablation switches off
/// exactly one of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Variant {
    /// Learnable per-mode embeddings added before every cross-attention layer.
    pub mode_queries: bool,
    /// Deformable self-attention fusion of the pyramid. When off, positional
    /// embeddings are summed onto the scene encodings instead.
    pub self_attention: bool,
    /// Chunked recurrent decoding. When off, one step predicts the whole
    /// horizon.
    pub recurrence: bool,
    /// Reference points start at the ego position. When off, they are
    /// learned from the mode embeddings by a linear map.
    pub ego_reference: bool,
}

impl Variant {
    pub const BASELINE: Self = Self { mode_queries: true, self_attention: true, recurrence: true, ego_reference: true };
    pub const NAMES: [&'static str; 5] = ["baseline", "no-mode-queries", "no-self-attention", "no-recurrence", "no-ego-reference"];

    pub fn from_name(name: &str) -> Result<Self> {
        let b = Self::BASELINE;
        Ok(match name {
            "baseline" => b,
            "no-mode-queries" => Self { mode_queries: false, ..b },
            "no-self-attention" => Self { self_attention: false, ..b },
            "no-recurrence" => Self { recurrence: false, ..b },
            "no-ego-reference" => Self { ego_reference: false, ..b },
            other => return Err(Error::Config(format!("unknown variant {other:?}; expected one of {:?}", Self::NAMES))),
        })
    }

    /// Canonical name of a single-ablation variant, or a flag listing.
    pub fn name(&self) -> String {
        Self::NAMES
            .iter()
            .find(|n| Self::from_name(n).ok() == Some(*self))
            .map(|n| String::from(*n))
            .unwrap_or_else(|| {
                format!(
                    "mode_queries={},self_attention={},recurrence={},ego_reference={}",
                    self.mode_queries, self.self_attention, self.recurrence, self.ego_reference
                )
            })
    }
}

impl Default for Variant {
    fn default() -> Self {
        Self::BASELINE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub static_channels: usize,
    pub dynamic_channels: usize,
    pub d: usize,
    pub strides: Vec<usize>,
    pub gru_hidden: usize,
    pub heads: usize,
    pub points: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_hidden: usize,
    pub modes: usize,
    /// Recurrent steps R.
    pub recurrent_steps: usize,
    /// Waypoints per step T_c.
    pub chunk: usize,
    /// Grid cells per unit of raw waypoint offset.
    pub offset_scale: f64,
    pub variant: Variant,
}

impl ModelConfig {
    /// Full-size configuration on the 152 x 96 grid.
    pub fn paper() -> Self {
        Self {
            height: 152,
            width: 96,
            t_in: 3,
            t_out: 12,
            static_channels: F_S,
            dynamic_channels: F_D,
            d: 64,
            strides: vec![4, 8, 16, 32],
            gru_hidden: 32,
            heads: 8,
            points: 4,
            encoder_layers: 4,
            decoder_layers: 4,
            ffn_hidden: 128,
            modes: 5,
            recurrent_steps: 3,
            chunk: 4,
            offset_scale: 4.0,
            variant: Variant::BASELINE,
        }
    }

    /// Laptop-scale configuration on the 76 x 48 grid.
    pub fn desk() -> Self {
        Self {
            height: 76,
            width: 48,
            d: 32,
            gru_hidden: 16,
            heads: 4,
            encoder_layers: 2,
            ffn_hidden: 64,
            ..Self::paper()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            static_channels: self.static_channels,
            dynamic_channels: self.dynamic_channels,
            d: self.d,
            strides: self.strides.clone(),
            gru_hidden: self.gru_hidden,
        }
    }

    pub fn attention(&self) -> DeformAttnConfig {
        DeformAttnConfig { d: self.d, heads: self.heads, levels: self.strides.len(), points: self.points }
    }

    /// Effective `(R, T_c)`: the configured chunking, or a single step over
    /// the whole horizon when recurrence is ablated.
    pub fn schedule(&self) -> (usize, usize) {
        if self.variant.recurrence {
            (self.recurrent_steps, self.chunk)
        } else {
            (1, self.t_out)
        }
    }

    /// Level shapes coarse to fine.
    pub fn level_shapes(&self) -> Result<Vec<(usize, usize)>> {
        self.backbone().level_shapes(self.height, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        self.level_shapes()?;
        self.attention().validate()?;
        if self.d % 4 != 0 {
            return Err(Error::Config(format!("model width {} must be a multiple of 4", self.d)));
        }
        if self.t_in == 0 || self.t_out == 0 || self.modes == 0 || self.decoder_layers == 0 {
            return Err(Error::Config("t_in, t_out, modes and decoder_layers must be positive".into()));
        }
        let (r, c) = self.schedule();
        if r * c != self.t_out {
            return Err(Error::Config(format!("recurrent steps {r} x chunk {c} != horizon {}", self.t_out)));
        }
        if !(self.offset_scale > 0.0) {
            return Err(Error::Config("offset_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Model inputs for `B` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T = f32> {
    /// `[B, F_s, H, W]`.
    pub static_maps: Tensor<T>,
    /// One `[B, F_d, H, W]` tensor per past step, oldest first, scaled by
    /// [`DYNAMIC_SCALE`].
    pub dynamic: Vec<Tensor<T>>,
    /// Ego anchor `(row, col)` per sample.
    pub ego: Vec<(usize, usize)>,
    /// Ground truth `[B, T_o, 2]` in grid coordinates `(x = col, y = row)`.
    pub gt: Tensor<T>,
    /// Drivable masks, `B` planes of `H * W`.
    pub drivable: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub resolution: f64,
}

impl<T: Real> Batch<T> {
    pub fn from_samples(samples: &[&RasterSample]) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::Input("empty batch".into()));
        };
        let (h, w, t_in, t_out) = (first.height, first.width, first.t_in, first.t_out);
        for s in samples {
            s.validate().map_err(Error::Input)?;
            if (s.height, s.width, s.t_in, s.t_out) != (h, w, t_in, t_out) || s.resolution != first.resolution {
                return Err(Error::Input("samples in a batch must share grid and horizon".into()));
            }
        }
        let b = samples.len();
        let plane = h * w;
        let static_maps = Tensor::from_vec(
            vec![b, F_S, h, w],
            samples.iter().flat_map(|s| s.static_maps.iter().map(|&v| T::of(v as f64))).collect(),
        )?;
        let mut dynamic = Vec::with_capacity(t_in);
        for t in 0..t_in {
            let mut data = Vec::with_capacity(b * F_D * plane);
            for s in samples {
                for (k, scale) in DYNAMIC_SCALE.iter().enumerate() {
                    let start = (t * F_D + k) * plane;
                    data.extend(s.dynamic[start..start + plane].iter().map(|&v| T::of(v as f64 / scale)));
                }
            }
            dynamic.push(Tensor::from_vec(vec![b, F_D, h, w], data)?);
        }
        let gt = Tensor::from_vec(
            vec![b, t_out, 2],
            samples.iter().flat_map(|s| s.gt.iter().flat_map(|p| [T::of(p[0] as f64), T::of(p[1] as f64)])).collect(),
        )?;
        Ok(Self {
            static_maps,
            dynamic,
            ego: samples.iter().map(|s| s.ego_cell).collect(),
            gt,
            drivable: samples.iter().flat_map(|s| s.drivable_mask.iter().copied()).collect(),
            height: h,
            width: w,
            resolution: first.resolution as f64,
        })
    }

    pub fn len(&self) -> usize {
        self.ego.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ego.is_empty()
    }
}

/// Scene encodings prepared for decoding.
#[derive(Debug, Clone)]
pub struct EncodedScene {
    /// Fused pyramid tokens `[B, S, d]`.
    pub tokens: Var,
    /// Cross-attention value maps, one set per decoder layer.
    pub values: Vec<ProjectedValues>,
}

/// Decoder state carried between recurrent steps.
#[derive(Debug, Clone, Copy)]
pub struct QueryState {
    /// `[B, M, d]`.
    pub temporal_q: Var,
    /// Normalized `(x, y)` reference points `[B, M, 2]`.
    pub refs: Var,
}

/// Output of one decode step.
#[derive(Debug, Clone, Copy)]
pub struct Chunk {
    /// `[B, M, T_c, 2]` grid positions.
    pub mu: Var,
    /// `[B, M, T_c, 2]` Laplace scales.
    pub b: Var,
    /// Output queries `[B, M, d]`.
    pub queries: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct Prediction {
    /// `[B, M, T_o, 2]` grid positions.
    pub mu: Var,
    /// `[B, M, T_o, 2]` positive scales.
    pub b: Var,
    /// `[B, M]` mode probabilities.
    pub pi: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    shapes: Vec<(usize, usize)>,
    pub backbone: Backbone,
    pub encoder: Option<FusionEncoder>,
    pub cross: CrossAttnStack,
    pub temporal_init: ParamId,
    pub mode_q: Option<ParamId>,
    pub ref_head: Option<Linear>,
    pub head: Mlp,
    pub prob_head: Linear,
}

impl Model {
    /// Builds the model and its seeded parameters.
    pub fn new<T: Real>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(seed));
        let shapes = config.level_shapes()?;
        let backbone = Backbone::new(&config.backbone(), &mut store, &mut init)?;
        let attn = config.attention();
        let encoder = if config.variant.self_attention {
            Some(FusionEncoder::new(attn, config.encoder_layers, config.ffn_hidden, &mut store, &mut init)?)
        } else {
            None
        };
        let cross = CrossAttnStack::new(attn, config.decoder_layers, config.ffn_hidden, &mut store, &mut init)?;
        let embed_bound = libm::sqrt(3.0);
        let temporal_init = store.add("decoder.temporal_init", init.uniform(&[1, config.d], embed_bound));
        let mode_q = config.variant.mode_queries.then(|| store.add("decoder.mode_queries", init.uniform(&[config.modes, config.d], embed_bound)));
        let ref_head = (!config.variant.ego_reference).then(|| Linear::new(&mut store, &mut init, "decoder.reference", config.d, 2));
        let (_, chunk) = config.schedule();
        let head = Mlp::new(&mut store, &mut init, "decoder.head", config.d, config.d, chunk * 4);
        let prob_head = Linear::new(&mut store, &mut init, "decoder.probability", config.d, 1);
        let model = Self { config: config.clone(), shapes, backbone, encoder, cross, temporal_init, mode_q, ref_head, head, prob_head };
        Ok((model, store))
    }

    /// Pyramid level shapes, coarse to fine.
    pub fn level_shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    fn check_batch<T: Real>(&self, batch: &Batch<T>) -> Result<()> {
        let c = &self.config;
        if batch.height != c.height || batch.width != c.width || batch.dynamic.len() != c.t_in || batch.gt.shape()[1] != c.t_out {
            return Err(Error::Input(format!(
                "batch grid {}x{} with {} past / {} future steps does not match model {}x{} with {}/{}",
                batch.height,
                batch.width,
                batch.dynamic.len(),
                batch.gt.shape()[1],
                c.height,
                c.width,
                c.t_in,
                c.t_out
            )));
        }
        Ok(())
    }

    /// Backbone, fusion, and the cross-attention value projections.
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, batch: &Batch<T>) -> Result<EncodedScene> {
        self.check_batch(batch)?;
        let stat = tape.constant(batch.static_maps.clone());
        let steps: Vec<Var> = batch.dynamic.iter().map(|t| tape.constant(t.clone())).collect();
        let levels = self.backbone.forward(tape, p, stat, &steps)?;
        let tokens = flatten_levels(tape, &levels)?;
        let tokens = self.fuse(tape, p, tokens)?;
        let values = self.cross.project(tape, p, tokens, &self.shapes)?;
        Ok(EncodedScene { tokens, values })
    }

    /// Self-attention fusion of pyramid tokens, or the positional sum when
    /// the fusion is ablated.
    pub fn fuse<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, tokens: Var) -> Result<Var> {
        let pos = tape.constant(positional_embedding(&self.shapes, self.config.d)?);
        match &self.encoder {
            Some(enc) => enc.forward(tape, p, tokens, pos, &self.shapes),
            None => Ok(tape.add(tokens, pos)?),
        }
    }

    /// Initial decoder state for `ego` anchors `(row, col)`.
    pub fn init_state<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, ego: &[(usize, usize)]) -> Result<QueryState> {
        let (h, w, m, d) = (self.config.height, self.config.width, self.config.modes, self.config.d);
        let b = ego.len();
        let init = p.var(self.temporal_init);
        let temporal_q = tape.reshape(init, &[1, 1, d])?;
        let temporal_q = tape.broadcast_to(temporal_q, &[b, m, d])?;
        let refs = match &self.ref_head {
            None => {
                let mut refs = Tensor::zeros(&[b, m, 2]);
                for (i, &(row, col)) in ego.iter().enumerate() {
                    if row >= h || col >= w {
                        return Err(Error::Input(format!("ego cell ({row}, {col}) outside the {h}x{w} grid")));
                    }
                    for k in 0..m {
                        refs.set(&[i, k, 0], T::of(col as f64) / T::of(w as f64));
                        refs.set(&[i, k, 1], T::of(row as f64) / T::of(h as f64));
                    }
                }
                tape.constant(refs)
            }
            Some(lin) => {
                let src = match self.mode_q {
                    Some(id) => p.var(id),
                    None => init,
                };
                let r = lin.forward(tape, p, src)?;
                let r = tape.sigmoid(r)?;
                let rows = tape.shape(r)[0];
                let r = tape.reshape(r, &[1, rows, 2])?;
                tape.broadcast_to(r, &[b, m, 2])?
            }
        };
        Ok(QueryState { temporal_q, refs })
    }

    /// One recurrent step: cross-attention, waypoint head, and both
    /// feedback updates.
    pub fn decode_step<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, state: QueryState, scene: &EncodedScene) -> Result<(Chunk, QueryState)> {
        let (h, w) = (self.config.height, self.config.width);
        let (_, tc) = self.config.schedule();
        let mode_q = self.mode_q.map(|id| p.var(id));
        let queries = self.cross.forward(tape, p, state.temporal_q, mode_q, state.refs, &scene.values, &self.shapes)?;
        let (b, m) = (tape.shape(queries)[0], tape.shape(queries)[1]);
        let raw = self.head.forward(tape, p, queries)?;
        let raw = tape.reshape(raw, &[b, m, tc, 4])?;
        let delta = tape.narrow(raw, 3, 0, 2)?;
        let delta = tape.scale(delta, T::of(self.config.offset_scale))?;
        let scale_raw = tape.narrow(raw, 3, 2, 2)?;
        let scale = tape.softplus(scale_raw)?;
        let scale = tape.add_scalar(scale, T::of(SCALE_EPSILON))?;
        let tril = tape.constant(Tensor::from_fn(&[tc, tc], |i| if i % tc <= i / tc { T::one() } else { T::zero() }));
        let cum = tape.matmul(tril, delta)?;
        let extent = tape.constant(Tensor::from_vec(vec![2], vec![T::of(w as f64), T::of(h as f64)])?);
        let anchor = tape.mul(state.refs, extent)?;
        let anchor = tape.reshape(anchor, &[b, m, 1, 2])?;
        let mu = tape.add(anchor, cum)?;
        let last = tape.narrow(mu, 2, tc - 1, 1)?;
        let last = tape.reshape(last, &[b, m, 2])?;
        let next = tape.div(last, extent)?;
        let outside = tape.value(next).data().iter().filter(|v| !(T::zero()..=T::one()).contains(*v)).count();
        tape.diagnostics_mut().ref_point_clamps += outside;
        let refs = tape.clamp(next, T::zero(), T::one())?;
        Ok((Chunk { mu, b: scale, queries }, QueryState { temporal_q: queries, refs }))
    }

    /// Runs all recurrent steps and the probability head.
    pub fn decode<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, state: QueryState, scene: &EncodedScene) -> Result<Prediction> {
        let (steps, _) = self.config.schedule();
        let mut state = state;
        let (mut mus, mut bs) = (Vec::with_capacity(steps), Vec::with_capacity(steps));
        for _ in 0..steps {
            let (chunk, next) = self.decode_step(tape, p, state, scene)?;
            mus.push(chunk.mu);
            bs.push(chunk.b);
            state = next;
        }
        let mu = tape.concat(&mus, 2)?;
        let b = tape.concat(&bs, 2)?;
        let logits = self.prob_head.forward(tape, p, state.temporal_q)?;
        let s = tape.shape(logits).to_vec();
        let logits = tape.reshape(logits, &[s[0], s[1]])?;
        let pi = tape.softmax(logits, 1)?;
        Ok(Prediction { mu, b, pi })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, batch: &Batch<T>) -> Result<Prediction> {
        let scene = self.encode(tape, p, batch)?;
        let state = self.init_state(tape, p, &batch.ego)?;
        self.decode(tape, p, state, &scene)
    }
}
