//! Parametric synthetic driving scenes and their raster encoding.
//!
//! [`generate_scene`] builds a vector scene (lanes, drivable and crossing
//! polygons, agents with past tracks, the ego's future) in an ego-centric
//! world frame. [`rasterize`] turns it into the model input: five binary
//! static maps and nine real-valued dynamic maps per past step.
//! [`augment`] applies the random rigid transform used during training.

mod augment;
mod generate;
pub mod geometry;
mod raster;

use alloc::string::String;
use alloc::vec::Vec;

pub use augment::{augment, augment_with, RigidTransform};
pub use generate::generate_scene;
pub use geometry::{GridFrame, PathBuilder, Point, Polygon, Polyline};
pub use raster::rasterize;

/// Number of static channels.
pub const F_S: usize = 5;
/// Number of dynamic channels per past step.
pub const F_D: usize = 9;

/// Static channel order.
pub mod static_channel {
    pub const DRIVABLE: usize = 0;
    pub const CENTERLINE: usize = 1;
    pub const LANE: usize = 2;
    pub const BOUNDARY: usize = 3;
    pub const CROSSING: usize = 4;
}

/// Dynamic channel order. Vector quantities use world axes (x right, y
/// ahead); the offset is the agent position minus the stamped cell's center
/// in meters; heading is a world angle from +x in radians. The paper's
/// "height" feature is encoded as the agent's footprint length.
pub mod dynamic_channel {
    pub const VEL_X: usize = 0;
    pub const VEL_Y: usize = 1;
    pub const ACC_X: usize = 2;
    pub const ACC_Y: usize = 3;
    pub const OFFSET_X: usize = 4;
    pub const OFFSET_Y: usize = 5;
    pub const LENGTH: usize = 6;
    pub const WIDTH: usize = 7;
    pub const HEADING: usize = 8;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SceneKind {
    Straight,
    Curve,
    TJunction,
    Fork,
}

impl SceneKind {
    pub const ALL: [SceneKind; 4] = [SceneKind::Straight, SceneKind::Curve, SceneKind::TJunction, SceneKind::Fork];

    pub fn name(self) -> &'static str {
        match self {
            SceneKind::Straight => "straight",
            SceneKind::Curve => "curve",
            SceneKind::TJunction => "t_junction",
            SceneKind::Fork => "fork",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Scene generation and raster geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneConfig {
    pub grid: GridFrame,
    /// Past steps, including the current one.
    pub t_in: usize,
    /// Future waypoints.
    pub t_out: usize,
    /// Seconds between steps.
    pub dt: f64,
    /// Ego speed range in m/s before the feasibility caps are applied.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Lateral acceleration bound used to cap speed on arcs, m/s².
    pub max_lateral_accel: f64,
}

impl SceneConfig {
    /// 152 m x 96 m at 1 m, ego at cell (122, 48).
    pub fn paper() -> Self {
        Self {
            grid: GridFrame { height: 152, width: 96, resolution: 1.0, ego_row: 122, ego_col: 48 },
            t_in: 3,
            t_out: 12,
            dt: 0.5,
            speed_min: 3.0,
            speed_max: 15.0,
            max_lateral_accel: 4.0,
        }
    }

    /// Quarter-area grid for fast experiments: 76 x 48, ego at (61, 24).
    pub fn desk() -> Self {
        Self { grid: GridFrame { height: 76, width: 48, resolution: 1.0, ego_row: 61, ego_col: 24 }, ..Self::paper() }
    }
}

/// Kinematic state of an agent at one past step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub pos: Point,
    pub vel: Point,
    pub acc: Point,
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    /// Oldest first; the last entry is the current step.
    pub track: Vec<AgentState>,
    pub length: f64,
    pub width: f64,
}

/// Vector description of a scene in the ego-centric world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub lanes: Vec<Polyline>,
    pub lane_polygons: Vec<Polygon>,
    pub drivable: Vec<Polygon>,
    pub crossings: Vec<Polygon>,
    pub agents: Vec<Agent>,
    pub ego: usize,
    /// Ego future waypoints in meters, one per future step.
    pub future: Vec<Point>,
    /// Feasible ego paths starting at the ego position (arc length 0).
    pub corridors: Vec<Polyline>,
    /// Index into `corridors` that `future` follows.
    pub chosen: usize,
    /// Ego speed in m/s.
    pub speed: f64,
}

impl SceneSpec {
    /// The same scene moved by `d` meters in the world frame.
    pub fn translated(&self, d: Point) -> Self {
        let shift = |p: Point| [p[0] + d[0], p[1] + d[1]];
        Self {
            kind: self.kind,
            lanes: self.lanes.iter().map(|l| l.translated(d)).collect(),
            lane_polygons: self.lane_polygons.iter().map(|p| p.translated(d)).collect(),
            drivable: self.drivable.iter().map(|p| p.translated(d)).collect(),
            crossings: self.crossings.iter().map(|p| p.translated(d)).collect(),
            agents: self
                .agents
                .iter()
                .map(|a| Agent { track: a.track.iter().map(|s| AgentState { pos: shift(s.pos), ..*s }).collect(), ..a.clone() })
                .collect(),
            ego: self.ego,
            future: self.future.iter().map(|&p| shift(p)).collect(),
            corridors: self.corridors.iter().map(|c| c.translated(d)).collect(),
            chosen: self.chosen,
            speed: self.speed,
        }
    }
}

/// Rasterized model input plus targets, in grid layout.
///
/// Layouts are channel-first: `static_maps` is `[F_S][H][W]`, `dynamic` is
/// `[T_i][F_D][H][W]`. `gt` holds grid-frame positions `(x = column,
/// y = row)` in cells.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterSample {
    pub height: usize,
    pub width: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub resolution: f32,
    pub static_maps: Vec<u8>,
    pub dynamic: Vec<f32>,
    pub drivable_mask: Vec<u8>,
    pub gt: Vec<[f32; 2]>,
    /// `(row, col)` of the ego anchor.
    pub ego_cell: (usize, usize),
}

impl RasterSample {
    pub fn static_at(&self, ch: usize, row: usize, col: usize) -> u8 {
        self.static_maps[(ch * self.height + row) * self.width + col]
    }

    pub fn dynamic_at(&self, t: usize, ch: usize, row: usize, col: usize) -> f32 {
        self.dynamic[((t * F_D + ch) * self.height + row) * self.width + col]
    }

    /// Consistency of buffer sizes with the header fields.
    pub fn validate(&self) -> Result<(), String> {
        let hw = self.height * self.width;
        if self.static_maps.len() != F_S * hw
            || self.dynamic.len() != self.t_in * F_D * hw
            || self.drivable_mask.len() != hw
            || self.gt.len() != self.t_out
        {
            return Err(alloc::format!("raster buffers inconsistent with {}x{} grid, T_i={}, T_o={}", self.height, self.width, self.t_in, self.t_out));
        }
        if self.ego_cell.0 >= self.height || self.ego_cell.1 >= self.width {
            return Err(alloc::format!("ego cell {:?} outside {}x{} grid", self.ego_cell, self.height, self.width));
        }
        Ok(())
    }
}
