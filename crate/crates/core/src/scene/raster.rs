//! Vector scene to grid rasters.

use alloc::vec;
use alloc::vec::Vec;

use libm::{ceil, cos, floor, hypot, sin};

use super::geometry::{GridFrame, Point, Polygon, Polyline};
use super::{dynamic_channel as dc, static_channel as sc, Agent, RasterSample, SceneConfig, SceneSpec, F_D, F_S};

/// Sets every cell whose center lies inside `poly`.
fn fill_polygon(map: &mut [u8], g: &GridFrame, poly: &Polygon) {
    let (lo, hi) = poly.bounds();
    let (a, b) = (g.to_grid(lo), g.to_grid(hi));
    let c0 = floor(a[0].min(b[0]) - 1.0).max(0.0) as usize;
    let c1 = (ceil(a[0].max(b[0]) + 1.0).max(0.0) as usize).min(g.width);
    let r0 = floor(a[1].min(b[1]) - 1.0).max(0.0) as usize;
    let r1 = (ceil(a[1].max(b[1]) + 1.0).max(0.0) as usize).min(g.height);
    for r in r0..r1 {
        for c in c0..c1 {
            if poly.contains(g.cell_center(r, c)) {
                map[r * g.width + c] = 1;
            }
        }
    }
}

/// Marks every cell the curve passes through (1 cell wide).
fn draw_polyline(map: &mut [u8], g: &GridFrame, line: &Polyline) {
    let step = 0.25 * g.resolution;
    let mark = |map: &mut [u8], p: Point| {
        if let Some((r, c)) = g.cell_of(g.to_grid(p)) {
            map[r * g.width + c] = 1;
        }
    };
    let pts = line.points();
    if let [only] = pts {
        mark(map, *only);
    }
    for w in pts.windows(2) {
        let n = ceil(hypot(w[1][0] - w[0][0], w[1][1] - w[0][1]) / step).max(1.0) as usize;
        for i in 0..=n {
            let t = i as f64 / n as f64;
            mark(map, [w[0][0] + t * (w[1][0] - w[0][0]), w[0][1] + t * (w[1][1] - w[0][1])]);
        }
    }
}

/// Drivable cells with a 4-neighbor outside the drivable area. The grid
/// border itself is not a road boundary.
fn boundary_of(drivable: &[u8], g: &GridFrame) -> Vec<u8> {
    let (h, w) = (g.height, g.width);
    let mut out = vec![0u8; h * w];
    for r in 0..h {
        for c in 0..w {
            if drivable[r * w + c] == 0 {
                continue;
            }
            let off = |dr: isize, dc: isize| {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w && drivable[rr as usize * w + cc as usize] == 0
            };
            if off(-1, 0) || off(1, 0) || off(0, -1) || off(0, 1) {
                out[r * w + c] = 1;
            }
        }
    }
    out
}

/// Writes one agent's features at step `t` onto the cells whose centers lie
/// in its oriented footprint (or the cell holding its position when the
/// footprint covers no center). Returns the number of cells written.
fn stamp_agent(dynamic: &mut [f32], g: &GridFrame, t: usize, agent: &Agent) -> usize {
    let s = &agent.track[t];
    let (ch, sh) = (cos(s.heading), sin(s.heading));
    let (hl, hw) = (agent.length / 2.0, agent.width / 2.0);
    let reach = hypot(hl, hw);
    let gp = g.to_grid(s.pos);
    let rad = reach / g.resolution + 1.0;
    let c0 = floor(gp[0] - rad).max(0.0) as usize;
    let c1 = (ceil(gp[0] + rad).max(0.0) as usize).min(g.width);
    let r0 = floor(gp[1] - rad).max(0.0) as usize;
    let r1 = (ceil(gp[1] + rad).max(0.0) as usize).min(g.height);
    let plane = g.height * g.width;
    let mut write = |r: usize, c: usize, center: Point| {
        let feats = [
            s.vel[0],
            s.vel[1],
            s.acc[0],
            s.acc[1],
            s.pos[0] - center[0],
            s.pos[1] - center[1],
            agent.length,
            agent.width,
            s.heading,
        ];
        for (k, v) in feats.iter().enumerate() {
            dynamic[(t * F_D + k) * plane + r * g.width + c] = *v as f32;
        }
    };
    let mut written = 0;
    for r in r0..r1 {
        for c in c0..c1 {
            let center = g.cell_center(r, c);
            let (dx, dy) = (center[0] - s.pos[0], center[1] - s.pos[1]);
            let along = dx * ch + dy * sh;
            let across = -dx * sh + dy * ch;
            if along.abs() <= hl && across.abs() <= hw {
                write(r, c, center);
                written += 1;
            }
        }
    }
    if written == 0 {
        if let Some((r, c)) = g.cell_of(gp) {
            write(r, c, g.cell_center(r, c));
            written = 1;
        }
    }
    written
}

/// Rasterizes `scene` on the grid of `cfg`.
///
/// Polygons are filled by a cell-center-in-polygon test, polylines are drawn
/// one cell wide, and agents are stamped per past step with the ego drawn
/// last so its features win where footprints overlap. Agents outside the
/// grid are clipped.
pub fn rasterize(scene: &SceneSpec, cfg: &SceneConfig) -> RasterSample {
    let g = &cfg.grid;
    let plane = g.height * g.width;
    let mut static_maps = vec![0u8; F_S * plane];
    {
        let (drivable, rest) = static_maps.split_at_mut(plane);
        for p in &scene.drivable {
            fill_polygon(drivable, g, p);
        }
        let (centerline, rest) = rest.split_at_mut(plane);
        for l in &scene.lanes {
            draw_polyline(centerline, g, l);
        }
        let (lanes, rest) = rest.split_at_mut(plane);
        for p in &scene.lane_polygons {
            fill_polygon(lanes, g, p);
        }
        rest[..plane].copy_from_slice(&boundary_of(drivable, g));
        let crossing = &mut rest[plane..2 * plane];
        for p in &scene.crossings {
            fill_polygon(crossing, g, p);
        }
    }
    debug_assert_eq!(sc::CROSSING, F_S - 1);
    debug_assert_eq!(dc::HEADING, F_D - 1);

    let mut dynamic = vec![0f32; cfg.t_in * F_D * plane];
    let n = scene.agents.len();
    let order = (0..n).filter(|&i| i != scene.ego).chain((scene.ego < n).then_some(scene.ego));
    for i in order {
        let agent = &scene.agents[i];
        for t in 0..cfg.t_in.min(agent.track.len()) {
            if stamp_agent(&mut dynamic, g, t, agent) == 0 {
                log::debug!("agent {i} outside the grid at step {t}; clipped");
            }
        }
    }

    let drivable_mask = static_maps[..plane].to_vec();
    let gt = scene
        .future
        .iter()
        .map(|&p| {
            let q = g.to_grid(p);
            [q[0] as f32, q[1] as f32]
        })
        .collect();
    RasterSample {
        height: g.height,
        width: g.width,
        t_in: cfg.t_in,
        t_out: cfg.t_out,
        resolution: g.resolution as f32,
        static_maps,
        dynamic,
        drivable_mask,
        gt,
        ego_cell: (g.ego_row, g.ego_col),
    }
}
