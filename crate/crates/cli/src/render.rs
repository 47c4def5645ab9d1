//! Static PPM (P6) rendering of a sample and predicted trajectories.

use std::path::Path;

use anyhow::{bail, Result};
use bevtraj_core::scene::{dynamic_channel, static_channel, RasterSample};
use serde::{Deserialize, Serialize};

/// Pixels per grid cell along each axis.
pub const CELL_PX: usize = 4;

pub const BACKGROUND: [u8; 3] = [24, 24, 28];
pub const DRIVABLE: [u8; 3] = [40, 70, 150];
pub const LANE: [u8; 3] = [150, 150, 150];
pub const CROSSING: [u8; 3] = [225, 225, 200];
pub const TRACK: [u8; 3] = [250, 150, 30];
pub const GROUND_TRUTH: [u8; 3] = [255, 255, 255];
/// One color per predicted mode (cycled beyond five).
pub const MODE_COLORS: [[u8; 3]; 5] = [[230, 40, 40], [40, 200, 70], [240, 220, 30], [200, 60, 220], [30, 220, 220]];

/// Predicted trajectories of one sample in grid coordinates
/// `(x = column, y = row)`, one polyline per mode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderPrediction {
    pub modes: Vec<Vec<[f64; 2]>>,
    #[serde(default)]
    pub probabilities: Vec<f64>,
}

pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Image {
    fn new(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![BACKGROUND; width * height] }
    }

    fn fill_cell(&mut self, row: usize, col: usize, c: [u8; 3]) {
        for y in row * CELL_PX..(row + 1) * CELL_PX {
            for x in col * CELL_PX..(col + 1) * CELL_PX {
                self.pixels[y * self.width + x] = c;
            }
        }
    }

    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = c;
        }
    }

    /// Bresenham segment, clipped to the image.
    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn polyline(&mut self, start: [f64; 2], points: &[[f64; 2]], c: [u8; 3]) {
        let px = |p: [f64; 2]| -> (i64, i64) {
            let clamp = |v: f64| v.clamp(-1e6, 1e6);
            ((clamp(p[0]) * CELL_PX as f64).round() as i64, (clamp(p[1]) * CELL_PX as f64).round() as i64)
        };
        let mut prev = px(start);
        for &p in points {
            if !(p[0].is_finite() && p[1].is_finite()) {
                continue;
            }
            let next = px(p);
            self.line(prev, next, c);
            prev = next;
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten());
        out
    }
}

/// Draws drivable area, lanes, crossings, agent occupancy over the input
/// steps, the ground-truth future and every predicted mode.
pub fn render(sample: &RasterSample, prediction: &RenderPrediction) -> Image {
    let (h, w) = (sample.height, sample.width);
    let mut img = Image::new(w * CELL_PX, h * CELL_PX);
    for row in 0..h {
        for col in 0..w {
            let on = |ch| sample.static_at(ch, row, col) != 0;
            let occupied = (0..sample.t_in).any(|t| sample.dynamic_at(t, dynamic_channel::LENGTH, row, col) != 0.0);
            let color = if occupied {
                Some(TRACK)
            } else if on(static_channel::CROSSING) {
                Some(CROSSING)
            } else if on(static_channel::LANE) || on(static_channel::CENTERLINE) {
                Some(LANE)
            } else if on(static_channel::DRIVABLE) {
                Some(DRIVABLE)
            } else {
                None
            };
            if let Some(c) = color {
                img.fill_cell(row, col, c);
            }
        }
    }
    let start = [sample.ego_cell.1 as f64, sample.ego_cell.0 as f64];
    let gt: Vec<[f64; 2]> = sample.gt.iter().map(|p| [p[0] as f64, p[1] as f64]).collect();
    img.polyline(start, &gt, GROUND_TRUTH);
    for (k, mode) in prediction.modes.iter().enumerate() {
        img.polyline(start, mode, MODE_COLORS[k % MODE_COLORS.len()]);
    }
    img
}

pub fn load_prediction(path: &Path) -> Result<RenderPrediction> {
    let p: RenderPrediction = serde_json::from_slice(&std::fs::read(path)?)?;
    if !p.probabilities.is_empty() && p.probabilities.len() != p.modes.len() {
        bail!("{} probabilities for {} modes", p.probabilities.len(), p.modes.len());
    }
    Ok(p)
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, img.to_ppm())?;
    Ok(())
}
