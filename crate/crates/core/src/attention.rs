//! Multi-scale deformable attention and the encoder/decoder stacks built on it.
//!
//! Pyramids are handled in token form: every level `[B, d, H_l, W_l]` is
//! flattened row-major to `[B, H_l * W_l, d]` and the levels are concatenated
//! coarse to fine into `[B, S, d]`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use libm::{cos, pow, sin};

use crate::nn::{Bound, Init, LayerNorm, Linear, Mlp, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// Level shapes `(H_l, W_l)`, coarse to fine.
pub type LevelShapes = [(usize, usize)];

/// Flattens pyramid levels `[B, d, H_l, W_l]` into tokens `[B, S, d]`.
pub fn flatten_levels<T: Real>(tape: &mut Tape<T>, levels: &[Var]) -> Result<Var> {
    let mut parts = Vec::with_capacity(levels.len());
    for &l in levels {
        let s = tape.shape(l).to_vec();
        let r = tape.reshape(l, &[s[0], s[1], s[2] * s[3]])?;
        parts.push(tape.permute(r, &[0, 2, 1])?);
    }
    Ok(tape.concat(&parts, 1)?)
}

/// Sinusoidal positional embedding of one `h x w` level as `[h * w, d]`
/// tokens. The first `d / 2` channels encode the row, the rest the column;
/// each half interleaves `sin` and `cos` at geometric frequencies
/// `10000^(-2i / (d/2))` of the phase `2π * index / extent`.
pub fn positional_embedding_level<T: Real>(h: usize, w: usize, d: usize) -> Result<Tensor<T>> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::Config(format!("positional embedding width {d} must be a positive multiple of 4")));
    }
    let half = d / 2;
    let freqs: Vec<f64> = (0..half / 2).map(|i| 1.0 / pow(10000.0, 2.0 * i as f64 / half as f64)).collect();
    let mut out = Tensor::zeros(&[h * w, d]);
    let data = out.data_mut();
    for r in 0..h {
        for c in 0..w {
            let row = &mut data[(r * w + c) * d..(r * w + c + 1) * d];
            let (pr, pc) = (2.0 * PI * r as f64 / h as f64, 2.0 * PI * c as f64 / w as f64);
            for (i, f) in freqs.iter().enumerate() {
                row[2 * i] = T::of(sin(pr * f));
                row[2 * i + 1] = T::of(cos(pr * f));
                row[half + 2 * i] = T::of(sin(pc * f));
                row[half + 2 * i + 1] = T::of(cos(pc * f));
            }
        }
    }
    Ok(out)
}

/// Positional embeddings of every level in token order, `[S, d]`.
pub fn positional_embedding<T: Real>(shapes: &LevelShapes, d: usize) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    for &(h, w) in shapes {
        data.extend(positional_embedding_level::<T>(h, w, d)?.into_data());
    }
    let s = data.len() / d;
    Ok(Tensor::from_vec(vec![s, d], data)?)
}

/// Normalized cell-center reference points `(x, y)` of every token, `[S, 2]`.
pub fn reference_grid<T: Real>(shapes: &LevelShapes) -> Tensor<T> {
    let mut data = Vec::new();
    for &(h, w) in shapes {
        for r in 0..h {
            for c in 0..w {
                data.push(T::of((c as f64 + 0.5) / w as f64));
                data.push(T::of((r as f64 + 0.5) / h as f64));
            }
        }
    }
    let s = data.len() / 2;
    Tensor::from_vec(vec![s, 2], data).expect("two coordinates per token")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeformAttnConfig {
    pub d: usize,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
}

impl DeformAttnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!("width {} not divisible by {} heads", self.d, self.heads)));
        }
        if self.levels == 0 || self.points == 0 {
            return Err(Error::Config("deformable attention needs at least one level and point".into()));
        }
        Ok(())
    }

    fn samples(&self) -> usize {
        self.levels * self.points
    }
}

/// Per-level value maps ready for sampling, `[B * heads, d / heads, H_l, W_l]`.
#[derive(Debug, Clone)]
pub struct ProjectedValues {
    maps: Vec<Var>,
    batch: usize,
}

/// Output of one attention call, with intermediates exposed for inspection.
#[derive(Debug, Clone, Copy)]
pub struct AttnOutput {
    /// `[B, Q, d]`.
    pub out: Var,
    /// Softmax weights `[B, Q, heads, levels * points]`.
    pub weights: Var,
    /// Sampling locations `[B, Q, heads, levels, points, 2]`.
    pub locations: Var,
}

/// Multi-scale deformable attention.
#[derive(Debug, Clone)]
pub struct MsDeformAttn {
    pub config: DeformAttnConfig,
    pub value_proj: Linear,
    pub offsets: Linear,
    pub weights: Linear,
    pub out_proj: Linear,
}

impl MsDeformAttn {
    /// Offsets start at zero weight with a bias that fans the points of each
    /// head out along a head-specific direction, `k + 1` cells for point `k`.
    /// Attention logits start at zero (uniform weights).
    pub fn new<T: Real>(config: DeformAttnConfig, store: &mut ParamStore<T>, init: &mut Init, name: &str) -> Result<Self> {
        config.validate()?;
        let DeformAttnConfig { d, heads, levels, points } = config;
        let value_proj = Linear::new(store, init, &format!("{name}.value"), d, d);
        let offsets = Linear::zeroed(store, &format!("{name}.offsets"), d, heads * levels * points * 2);
        let bias = store.get_mut(offsets.b).data_mut();
        for h in 0..heads {
            let a = 2.0 * PI * h as f64 / heads as f64;
            let (dx, dy) = (cos(a), sin(a));
            let m = dx.abs().max(dy.abs());
            for l in 0..levels {
                for k in 0..points {
                    let i = ((h * levels + l) * points + k) * 2;
                    bias[i] = T::of(dx / m * (k + 1) as f64);
                    bias[i + 1] = T::of(dy / m * (k + 1) as f64);
                }
            }
        }
        let weights = Linear::zeroed(store, &format!("{name}.weights"), d, heads * levels * points);
        let out_proj = Linear::new(store, init, &format!("{name}.out"), d, d);
        Ok(Self { config, value_proj, offsets, weights, out_proj })
    }

    /// Applies the value projection to tokens `[B, S, d]` and splits the
    /// result into per-level, per-head maps.
    pub fn project_values<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, tokens: Var, shapes: &LevelShapes) -> Result<ProjectedValues> {
        let DeformAttnConfig { d, heads, .. } = self.config;
        let s = tape.shape(tokens).to_vec();
        let total: usize = shapes.iter().map(|(h, w)| h * w).sum();
        if s.len() != 3 || s[1] != total || s[2] != d || shapes.len() != self.config.levels {
            return Err(Error::Config(format!("value tokens {s:?} do not match level shapes {shapes:?} at width {d}")));
        }
        let b = s[0];
        let v = self.value_proj.forward(tape, p, tokens)?;
        let mut maps = Vec::with_capacity(shapes.len());
        let mut start = 0;
        for &(h, w) in shapes {
            let lv = tape.narrow(v, 1, start, h * w)?;
            let lv = tape.reshape(lv, &[b, h, w, heads, d / heads])?;
            let lv = tape.permute(lv, &[0, 3, 4, 1, 2])?;
            maps.push(tape.reshape(lv, &[b * heads, d / heads, h, w])?);
            start += h * w;
        }
        Ok(ProjectedValues { maps, batch: b })
    }

    /// Attends from `query [B, Q, d]` around `refs [B, Q, 2]` (normalized
    /// `(x, y)`, clamped to `[0, 1]` with a diagnostics count).
    pub fn attend<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        query: Var,
        refs: Var,
        values: &ProjectedValues,
        shapes: &LevelShapes,
    ) -> Result<AttnOutput> {
        let DeformAttnConfig { d, heads, levels, points } = self.config;
        let qs = tape.shape(query).to_vec();
        let (b, q) = (qs[0], qs[1]);
        if qs.len() != 3 || qs[2] != d || tape.shape(refs) != [b, q, 2] || values.batch != b {
            return Err(Error::Config(format!("query {qs:?} / refs {:?} inconsistent with width {d}, batch {}", tape.shape(refs), values.batch)));
        }
        let outside = tape.value(refs).data().iter().filter(|v| !(T::zero()..=T::one()).contains(*v)).count();
        tape.diagnostics_mut().ref_point_clamps += outside;
        let refs = tape.clamp(refs, T::zero(), T::one())?;

        let off = self.offsets.forward(tape, p, query)?;
        let off = tape.reshape(off, &[b, q, heads, levels, points, 2])?;
        let mut norm = Tensor::zeros(&[levels, 1, 2]);
        for (l, &(h, w)) in shapes.iter().enumerate() {
            norm.set(&[l, 0, 0], T::of(1.0 / w as f64));
            norm.set(&[l, 0, 1], T::of(1.0 / h as f64));
        }
        let norm = tape.constant(norm);
        let off = tape.mul(off, norm)?;
        let r = tape.reshape(refs, &[b, q, 1, 1, 1, 2])?;
        let loc = tape.add(off, r)?;
        let per_level = tape.permute(loc, &[0, 2, 3, 1, 4, 5])?;
        let mut sampled = Vec::with_capacity(levels);
        for (l, &map) in values.maps.iter().enumerate() {
            let pts = tape.narrow(per_level, 2, l, 1)?;
            let pts = tape.reshape(pts, &[b * heads, q * points, 2])?;
            let s = tape.bilinear_sample(map, pts)?;
            sampled.push(tape.reshape(s, &[b, heads, q, points, d / heads])?);
        }
        let sampled = tape.concat(&sampled, 3)?;

        let logits = self.weights.forward(tape, p, query)?;
        let logits = tape.reshape(logits, &[b, q, heads, self.config.samples()])?;
        let weights = tape.softmax(logits, 3)?;
        let w = tape.permute(weights, &[0, 2, 1, 3])?;
        let w = tape.reshape(w, &[b, heads, q, 1, self.config.samples()])?;
        let mixed = tape.matmul(w, sampled)?;
        let mixed = tape.reshape(mixed, &[b, heads, q, d / heads])?;
        let mixed = tape.permute(mixed, &[0, 2, 1, 3])?;
        let mixed = tape.reshape(mixed, &[b, q, d])?;
        let out = self.out_proj.forward(tape, p, mixed)?;
        Ok(AttnOutput { out, weights, locations: loc })
    }
}

/// Attention + feed-forward block with post-normalization.
#[derive(Debug, Clone)]
pub struct AttnLayer {
    pub attn: MsDeformAttn,
    pub norm1: LayerNorm,
    pub ffn: Mlp,
    pub norm2: LayerNorm,
}

impl AttnLayer {
    pub fn new<T: Real>(config: DeformAttnConfig, ffn_hidden: usize, store: &mut ParamStore<T>, init: &mut Init, name: &str) -> Result<Self> {
        Ok(Self {
            attn: MsDeformAttn::new(config, store, init, &format!("{name}.attn"))?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), config.d),
            ffn: Mlp::new(store, init, &format!("{name}.ffn"), config.d, ffn_hidden, config.d),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), config.d),
        })
    }

    /// `x <- LN(x + attn(query, refs)); x <- LN(x + FFN(x))`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        query: Var,
        refs: Var,
        values: &ProjectedValues,
        shapes: &LevelShapes,
    ) -> Result<Var> {
        let a = self.attn.attend(tape, p, query, refs, values, shapes)?;
        let x = tape.add(x, a.out)?;
        let x = self.norm1.forward(tape, p, x)?;
        let f = self.ffn.forward(tape, p, x)?;
        let x = tape.add(x, f)?;
        Ok(self.norm2.forward(tape, p, x)?)
    }
}

/// Deformable self-attention over all pyramid tokens: every token queries
/// around its own cell center with its positional embedding added.
#[derive(Debug, Clone)]
pub struct FusionEncoder {
    pub layers: Vec<AttnLayer>,
}

impl FusionEncoder {
    pub fn new<T: Real>(config: DeformAttnConfig, n: usize, ffn_hidden: usize, store: &mut ParamStore<T>, init: &mut Init) -> Result<Self> {
        let layers = (0..n).map(|i| AttnLayer::new(config, ffn_hidden, store, init, &format!("encoder.{i}"))).collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// `tokens [B, S, d]`, `pos [S, d]` constant.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, tokens: Var, pos: Var, shapes: &LevelShapes) -> Result<Var> {
        let s = tape.shape(tokens).to_vec();
        let refs = tape.constant(reference_grid(shapes));
        let refs = tape.broadcast_to(refs, &[s[0], s[1], 2])?;
        let mut x = tokens;
        for layer in &self.layers {
            let values = layer.attn.project_values(tape, p, x, shapes)?;
            let q = tape.add(x, pos)?;
            x = layer.forward(tape, p, x, q, refs, &values, shapes)?;
        }
        Ok(x)
    }
}

/// The N-layer deformable cross-attention stack of the decoder.
#[derive(Debug, Clone)]
pub struct CrossAttnStack {
    pub layers: Vec<AttnLayer>,
}

impl CrossAttnStack {
    pub fn new<T: Real>(config: DeformAttnConfig, n: usize, ffn_hidden: usize, store: &mut ParamStore<T>, init: &mut Init) -> Result<Self> {
        let layers = (0..n).map(|i| AttnLayer::new(config, ffn_hidden, store, init, &format!("decoder.layer.{i}"))).collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Value maps of every layer. They depend only on the scene, so a
    /// recurrent decoder computes them once.
    pub fn project<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, tokens: Var, shapes: &LevelShapes) -> Result<Vec<ProjectedValues>> {
        self.layers.iter().map(|l| l.attn.project_values(tape, p, tokens, shapes)).collect()
    }

    /// `temporal_q [B, M, d]`, optional `mode_q [M, d]` added to the running
    /// queries before every layer (the sum is both the attention query and
    /// the residual stream), `refs [B, M, 2]`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        temporal_q: Var,
        mode_q: Option<Var>,
        refs: Var,
        values: &[ProjectedValues],
        shapes: &LevelShapes,
    ) -> Result<Var> {
        let mut x = temporal_q;
        for (layer, v) in self.layers.iter().zip(values) {
            let q = match mode_q {
                Some(m) => tape.add(x, m)?,
                None => x,
            };
            x = layer.forward(tape, p, q, q, refs, v, shapes)?;
        }
        Ok(x)
    }
}
