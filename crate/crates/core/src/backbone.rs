//! Convolutional scene encoder producing an L-level feature pyramid.
//!
//! Static rasters go through a strided stem and one downsampling block per
//! further level. Dynamic rasters share a strided stem across time, are
//! integrated by a convolutional GRU at the finest level, and the final hidden
//! state is downsampled to every level. Each level then fuses the two
//! branches with a channel concatenation and a 1x1 convolution.

use alloc::format;
use alloc::vec::Vec;

use crate::nn::{Bound, Conv, Init, ParamStore};
use crate::tensor::{Real, Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub static_channels: usize,
    pub dynamic_channels: usize,
    /// Channel width of every pyramid level.
    pub d: usize,
    /// Cumulative stride of each level, finest first, e.g. `[4, 8, 16, 32]`.
    pub strides: Vec<usize>,
    /// Hidden width of the convolutional GRU.
    pub gru_hidden: usize,
}

/// Odd kernel and padding for a strided convolution: `k = 2 * (s / 2) + 1`.
fn strided_kernel(stride: usize) -> (usize, usize) {
    let k = 2 * (stride / 2) + 1;
    (k, k / 2)
}

fn conv_out(n: usize, k: usize, s: usize, p: usize) -> usize {
    (n + 2 * p - k) / s + 1
}

impl BackboneConfig {
    /// Checks the schedule against a grid and returns the level shapes,
    /// coarse to fine.
    pub fn level_shapes(&self, height: usize, width: usize) -> Result<Vec<(usize, usize)>> {
        if self.d == 0 || self.gru_hidden == 0 {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        let Some(&s0) = self.strides.first() else {
            return Err(Error::Config("backbone needs at least one level".into()));
        };
        if s0 == 0 || self.strides.windows(2).any(|w| w[1] <= w[0] || w[1] % w[0] != 0) {
            return Err(Error::Config(format!("strides {:?} must be positive, strictly increasing with integer ratios", self.strides)));
        }
        if height % s0 != 0 || width % s0 != 0 {
            return Err(Error::Config(format!("grid {height}x{width} not divisible by the first stride {s0}")));
        }
        let mut shapes = Vec::with_capacity(self.strides.len());
        let (k, p) = strided_kernel(s0);
        let (mut h, mut w) = (conv_out(height, k, s0, p), conv_out(width, k, s0, p));
        shapes.push((h, w));
        for win in self.strides.windows(2) {
            let r = win[1] / win[0];
            let (k, p) = strided_kernel(r);
            h = conv_out(h, k, r, p);
            w = conv_out(w, k, r, p);
            shapes.push((h, w));
        }
        shapes.reverse();
        Ok(shapes)
    }
}

#[derive(Debug, Clone)]
struct Block {
    down: Conv,
    refine: Conv,
}

impl Block {
    fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.down.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        let h = self.refine.forward(tape, p, h)?;
        Ok(tape.relu(h)?)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    /// Finest first.
    static_blocks: Vec<Block>,
    dyn_stem: Conv,
    gru_gates: Conv,
    gru_cand: Conv,
    /// Finest first: a projection from the GRU state, then strided convs.
    dyn_levels: Vec<Conv>,
    /// Finest first.
    fuse: Vec<Conv>,
}

impl Backbone {
    pub fn new<T: Real>(config: &BackboneConfig, store: &mut ParamStore<T>, init: &mut Init) -> Result<Self> {
        if config.strides.is_empty() {
            return Err(Error::Config("backbone needs at least one level".into()));
        }
        let d = config.d;
        let g = config.gru_hidden;
        let mut static_blocks = Vec::new();
        let mut dyn_levels = Vec::new();
        let mut fuse = Vec::new();
        let mut prev = 1;
        for (l, &s) in config.strides.iter().enumerate() {
            let r = s / prev;
            let (k, pad) = strided_kernel(r);
            let c_in = if l == 0 { config.static_channels } else { d };
            static_blocks.push(Block {
                down: Conv::new(store, init, &format!("backbone.static.{l}.down"), c_in, d, k, r, pad),
                refine: Conv::new(store, init, &format!("backbone.static.{l}.refine"), d, d, 3, 1, 1),
            });
            dyn_levels.push(if l == 0 {
                Conv::new(store, init, "backbone.dynamic.0.proj", g, d, 3, 1, 1)
            } else {
                Conv::new(store, init, &format!("backbone.dynamic.{l}.down"), d, d, k, r, pad)
            });
            fuse.push(Conv::new(store, init, &format!("backbone.fuse.{l}"), 2 * d, d, 1, 1, 0));
            prev = s;
        }
        let (k0, p0) = strided_kernel(config.strides[0]);
        let dyn_stem = Conv::new(store, init, "backbone.dynamic.stem", config.dynamic_channels, g, k0, config.strides[0], p0);
        let gru_gates = Conv::new(store, init, "backbone.gru.gates", 2 * g, 2 * g, 3, 1, 1);
        let gru_cand = Conv::new(store, init, "backbone.gru.candidate", 2 * g, g, 3, 1, 1);
        Ok(Self { config: config.clone(), static_blocks, dyn_stem, gru_gates, gru_cand, dyn_levels, fuse })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Static features per level, finest first. Input `[B, F_s, H, W]`.
    pub fn encode_static<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.static_blocks.len());
        let mut h = x;
        for block in &self.static_blocks {
            h = block.forward(tape, p, h)?;
            out.push(h);
        }
        Ok(out)
    }

    /// One convolutional GRU update.
    fn gru_step<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, h: Var) -> Result<Var> {
        let g = self.config.gru_hidden;
        let xh = tape.concat(&[x, h], 1)?;
        let gates = self.gru_gates.forward(tape, p, xh)?;
        let gates = tape.sigmoid(gates)?;
        let z = tape.narrow(gates, 1, 0, g)?;
        let r = tape.narrow(gates, 1, g, g)?;
        let rh = tape.mul(r, h)?;
        let xrh = tape.concat(&[x, rh], 1)?;
        let n = self.gru_cand.forward(tape, p, xrh)?;
        let n = tape.tanh(n)?;
        // h' = n + z * (h - n)
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        Ok(tape.add(n, zd)?)
    }

    /// Dynamic features per level, finest first. `steps` holds one
    /// `[B, F_d, H, W]` input per past step, oldest first.
    pub fn encode_dynamic<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, steps: &[Var]) -> Result<Vec<Var>> {
        if steps.is_empty() {
            return Err(Error::Config("dynamic encoder needs at least one time step".into()));
        }
        let mut h: Option<Var> = None;
        for &x in steps {
            let e = self.dyn_stem.forward(tape, p, x)?;
            let e = tape.relu(e)?;
            let prev = match h {
                Some(h) => h,
                None => {
                    let shape = tape.shape(e).to_vec();
                    tape.constant(crate::tensor::Tensor::zeros(&shape))
                }
            };
            h = Some(self.gru_step(tape, p, e, prev)?);
        }
        let mut out = Vec::with_capacity(self.dyn_levels.len());
        let mut cur = h.expect("at least one step");
        for conv in &self.dyn_levels {
            let y = conv.forward(tape, p, cur)?;
            cur = tape.relu(y)?;
            out.push(cur);
        }
        Ok(out)
    }

    /// Per-level concatenation and 1x1 projection back to width `d`.
    pub fn fuse<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, stat: &[Var], dynamic: &[Var]) -> Result<Vec<Var>> {
        if stat.len() != self.fuse.len() || dynamic.len() != self.fuse.len() {
            return Err(Error::Config(format!(
                "fuse expects {} levels, got {} static and {} dynamic",
                self.fuse.len(),
                stat.len(),
                dynamic.len()
            )));
        }
        let mut out = Vec::with_capacity(self.fuse.len());
        for ((conv, &s), &d) in self.fuse.iter().zip(stat).zip(dynamic) {
            if tape.shape(s) != tape.shape(d) {
                return Err(Error::Config(format!("level shapes differ: {:?} vs {:?}", tape.shape(s), tape.shape(d))));
            }
            let cat = tape.concat(&[s, d], 1)?;
            out.push(conv.forward(tape, p, cat)?);
        }
        Ok(out)
    }

    /// Full encoder; returns the pyramid coarse to fine.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, stat: Var, steps: &[Var]) -> Result<Vec<Var>> {
        let s = self.encode_static(tape, p, stat)?;
        let d = self.encode_dynamic(tape, p, steps)?;
        let mut levels = self.fuse(tape, p, &s, &d)?;
        levels.reverse();
        Ok(levels)
    }
}
