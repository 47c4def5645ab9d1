//! Random rigid-transform augmentation of raster samples.

use alloc::vec;
use core::f64::consts::PI;

use libm::{atan2, cos, floor, sin};
use rand::Rng;

use super::{dynamic_channel as dc, RasterSample, F_D, F_S};

/// Probability that [`augment`] transforms a sample.
pub const AUGMENT_PROBABILITY: f64 = 0.75;
/// Rotation range, radians.
pub const MAX_ROTATION: f64 = PI / 3.0;
/// Translation range per axis, grid cells.
pub const MAX_TRANSLATION: f64 = 3.0;

/// Rotation by `theta` (counter-clockwise in the world frame) about the ego
/// anchor, followed by a translation of `(dx, dy)` grid cells along
/// `(column, row)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub theta: f64,
    pub dx: f64,
    pub dy: f64,
}

impl RigidTransform {
    pub const IDENTITY: Self = Self { theta: 0.0, dx: 0.0, dy: 0.0 };

    /// Grid-frame image of `p`: `A (p - a) + a + t` with
    /// `A = [[cos, sin], [-sin, cos]]` (rows point down, so a world
    /// counter-clockwise turn has this sign pattern).
    pub fn apply(&self, anchor: [f64; 2], p: [f64; 2]) -> [f64; 2] {
        let (c, s) = (cos(self.theta), sin(self.theta));
        let (x, y) = (p[0] - anchor[0], p[1] - anchor[1]);
        [c * x + s * y + anchor[0] + self.dx, -s * x + c * y + anchor[1] + self.dy]
    }

    /// Preimage of `q` under [`Self::apply`].
    pub fn invert(&self, anchor: [f64; 2], q: [f64; 2]) -> [f64; 2] {
        let (c, s) = (cos(self.theta), sin(self.theta));
        let (x, y) = (q[0] - anchor[0] - self.dx, q[1] - anchor[1] - self.dy);
        [c * x - s * y + anchor[0], s * x + c * y + anchor[1]]
    }

    /// Rotates a world-frame vector by `theta`.
    pub fn rotate_world(&self, v: [f64; 2]) -> [f64; 2] {
        let (c, s) = (cos(self.theta), sin(self.theta));
        [c * v[0] - s * v[1], s * v[0] + c * v[1]]
    }
}

fn wrap_angle(a: f64) -> f64 {
    atan2(sin(a), cos(a))
}

/// Applies `tf` to every raster channel and the ground truth in one
/// resampling pass. Binary maps use nearest-cell lookup. Real-valued dynamic
/// maps keep the nearest-cell occupancy and interpolate bilinearly over the
/// occupied neighbouring cells only, so agent features are not blended with
/// empty background. Vector channels are rotated and headings shifted by
/// `theta`. The ego anchor cell is left in place.
pub fn augment_with(sample: &RasterSample, tf: &RigidTransform) -> RasterSample {
    let (h, w) = (sample.height, sample.width);
    let plane = h * w;
    let anchor = [sample.ego_cell.1 as f64, sample.ego_cell.0 as f64];
    let cell = |p: [f64; 2]| -> Option<usize> {
        let (c, r) = (floor(p[0]), floor(p[1]));
        (c >= 0.0 && r >= 0.0 && (c as usize) < w && (r as usize) < h).then(|| r as usize * w + c as usize)
    };
    let sources: alloc::vec::Vec<[f64; 2]> =
        (0..plane).map(|i| tf.invert(anchor, [(i % w) as f64 + 0.5, (i / w) as f64 + 0.5])).collect();

    let mut out = sample.clone();
    for (i, &p) in sources.iter().enumerate() {
        let src = cell(p);
        for ch in 0..F_S {
            out.static_maps[ch * plane + i] = src.map_or(0, |j| sample.static_maps[ch * plane + j]);
        }
        out.drivable_mask[i] = src.map_or(0, |j| sample.drivable_mask[j]);
    }

    out.dynamic = vec![0.0; sample.dynamic.len()];
    for t in 0..sample.t_in {
        let base = t * F_D * plane;
        let occupied = |j: usize| sample.dynamic[base + dc::WIDTH * plane + j] != 0.0;
        for (i, &p) in sources.iter().enumerate() {
            if !cell(p).is_some_and(occupied) {
                continue;
            }
            let (x, y) = (p[0] - 0.5, p[1] - 0.5);
            let (x0, y0) = (floor(x), floor(y));
            let (fx, fy) = (x - x0, y - y0);
            let mut feats = [0.0f64; F_D];
            let mut total = 0.0;
            for (ox, oy, wt) in [(0.0, 0.0, (1.0 - fx) * (1.0 - fy)), (1.0, 0.0, fx * (1.0 - fy)), (0.0, 1.0, (1.0 - fx) * fy), (1.0, 1.0, fx * fy)] {
                let Some(j) = cell([x0 + ox + 0.5, y0 + oy + 0.5]) else { continue };
                if wt == 0.0 || !occupied(j) {
                    continue;
                }
                total += wt;
                for (k, f) in feats.iter_mut().enumerate() {
                    *f += wt * sample.dynamic[base + k * plane + j] as f64;
                }
            }
            feats.iter_mut().for_each(|f| *f /= total);
            for (a, b) in [(dc::VEL_X, dc::VEL_Y), (dc::ACC_X, dc::ACC_Y), (dc::OFFSET_X, dc::OFFSET_Y)] {
                let r = tf.rotate_world([feats[a], feats[b]]);
                feats[a] = r[0];
                feats[b] = r[1];
            }
            feats[dc::HEADING] = wrap_angle(feats[dc::HEADING] + tf.theta);
            for (k, f) in feats.iter().enumerate() {
                out.dynamic[base + k * plane + i] = *f as f32;
            }
        }
    }

    for g in out.gt.iter_mut() {
        let q = tf.apply(anchor, [g[0] as f64, g[1] as f64]);
        *g = [q[0] as f32, q[1] as f32];
    }
    out
}

/// With probability 0.75 applies a transform with `theta ~ U[-60°, 60°]` and
/// `(dx, dy) ~ U[-3, 3]²` cells (rotation and translation drawn jointly);
/// otherwise returns an unchanged copy.
pub fn augment<R: Rng + ?Sized>(sample: &RasterSample, rng: &mut R) -> RasterSample {
    if !rng.random_bool(AUGMENT_PROBABILITY) {
        return sample.clone();
    }
    let tf = RigidTransform {
        theta: rng.random_range(-MAX_ROTATION..=MAX_ROTATION),
        dx: rng.random_range(-MAX_TRANSLATION..=MAX_TRANSLATION),
        dy: rng.random_range(-MAX_TRANSLATION..=MAX_TRANSLATION),
    };
    augment_with(sample, &tf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, rasterize, SceneConfig, SceneKind};
    use core::f64::consts::FRAC_PI_2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(seed: u64, kind: SceneKind) -> RasterSample {
        let cfg = SceneConfig::desk();
        rasterize(&generate_scene(seed, kind, &cfg), &cfg)
    }

    #[test]
    fn identity_transform_is_a_no_op() {
        for kind in SceneKind::ALL {
            let s = sample(3, kind);
            assert_eq!(augment_with(&s, &RigidTransform::IDENTITY), s);
        }
    }

    #[test]
    fn pure_translation_shifts_gt_and_cells() {
        let s = sample(5, SceneKind::Curve);
        let tf = RigidTransform { theta: 0.0, dx: 3.0, dy: 0.0 };
        let a = augment_with(&s, &tf);
        for (p, q) in s.gt.iter().zip(&a.gt) {
            assert_eq!(q[0], p[0] + 3.0);
            assert_eq!(q[1], p[1]);
        }
        for r in 0..s.height {
            for c in 3..s.width {
                assert_eq!(a.static_at(0, r, c), s.static_at(0, r, c - 3));
            }
        }
    }

    #[test]
    fn rotation_shifts_ego_heading() {
        let s = sample(2, SceneKind::Straight);
        let theta = 60f64.to_radians();
        let a = augment_with(&s, &RigidTransform { theta, dx: 0.0, dy: 0.0 });
        let (row, col) = s.ego_cell;
        let t = s.t_in - 1;
        let before = s.dynamic_at(t, dc::HEADING, row, col) as f64;
        assert!((before - FRAC_PI_2).abs() < 1e-6);
        let after = a.dynamic_at(t, dc::HEADING, row, col) as f64;
        let diff = wrap_angle(after - (before + theta));
        assert!(diff.abs() < 1e-5, "heading {after} vs {}", before + theta);
        // velocity points along the new heading
        let (vx, vy) = (a.dynamic_at(t, dc::VEL_X, row, col) as f64, a.dynamic_at(t, dc::VEL_Y, row, col) as f64);
        assert!(wrap_angle(atan2(vy, vx) - (FRAC_PI_2 + theta)).abs() < 1e-5);
    }

    #[test]
    fn preserves_shapes_and_binary_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for seed in 0..20 {
            let s = sample(seed, SceneKind::ALL[seed as usize % 4]);
            let a = augment(&s, &mut rng);
            assert!(a.validate().is_ok());
            assert_eq!(a.static_maps.len(), s.static_maps.len());
            assert!(a.static_maps.iter().chain(&a.drivable_mask).all(|&v| v <= 1));
            assert!(a.dynamic.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn apply_and_invert_are_inverse() {
        let tf = RigidTransform { theta: 0.7, dx: -1.5, dy: 2.25 };
        let a = [24.0, 61.0];
        let p = [10.3, 40.9];
        let q = tf.invert(a, tf.apply(a, p));
        assert!((q[0] - p[0]).abs() < 1e-12 && (q[1] - p[1]).abs() < 1e-12);
    }
}
