//! Planar geometry in the ego-centric world frame (meters, x right, y ahead).

use alloc::vec;
use alloc::vec::Vec;

use libm::{atan2, cos, floor, hypot, sin};

pub type Point = [f64; 2];

/// Piecewise-linear curve with arc-length parameterization.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    points: Vec<Point>,
    cum: Vec<f64>,
}

impl Polyline {
    /// Builds a polyline; consecutive duplicate points are dropped.
    pub fn new(points: Vec<Point>) -> Self {
        let mut pts: Vec<Point> = Vec::with_capacity(points.len());
        for p in points {
            if pts.last().is_none_or(|q| hypot(p[0] - q[0], p[1] - q[1]) > 1e-9) {
                pts.push(p);
            }
        }
        let mut cum = vec![0.0; pts.len()];
        for i in 1..pts.len() {
            cum[i] = cum[i - 1] + hypot(pts[i][0] - pts[i - 1][0], pts[i][1] - pts[i - 1][1]);
        }
        Self { points: pts, cum }
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        self.cum.last().copied().unwrap_or(0.0)
    }

    fn segment(&self, s: f64) -> usize {
        let n = self.points.len();
        if n < 2 {
            return 0;
        }
        match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap_or(core::cmp::Ordering::Less)) {
            Ok(i) => i.min(n - 2),
            Err(i) => i.saturating_sub(1).min(n - 2),
        }
    }

    /// Point at arc length `s`, extrapolated linearly past either end.
    pub fn point_at(&self, s: f64) -> Point {
        match self.points.len() {
            0 => [0.0, 0.0],
            1 => self.points[0],
            _ => {
                let i = self.segment(s);
                let (a, b) = (self.points[i], self.points[i + 1]);
                let len = self.cum[i + 1] - self.cum[i];
                let t = (s - self.cum[i]) / len;
                [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
            }
        }
    }

    /// Direction of travel at arc length `s`, as a world angle from +x.
    pub fn heading_at(&self, s: f64) -> f64 {
        if self.points.len() < 2 {
            return core::f64::consts::FRAC_PI_2;
        }
        let i = self.segment(s);
        let (a, b) = (self.points[i], self.points[i + 1]);
        atan2(b[1] - a[1], b[0] - a[0])
    }

    /// Euclidean distance from `p` to the curve.
    pub fn distance(&self, p: Point) -> f64 {
        if self.points.len() == 1 {
            return hypot(p[0] - self.points[0][0], p[1] - self.points[0][1]);
        }
        self.points.windows(2).map(|w| segment_distance(p, w[0], w[1])).fold(f64::INFINITY, f64::min)
    }

    /// Curve shifted sideways by `d` (positive = to the left of travel).
    pub fn offset(&self, d: f64) -> Self {
        let n = self.points.len();
        let pts = (0..n)
            .map(|i| {
                let (a, b) = if i + 1 < n { (self.points[i], self.points[i + 1]) } else { (self.points[i - 1], self.points[i]) };
                let h = atan2(b[1] - a[1], b[0] - a[0]);
                [self.points[i][0] - d * sin(h), self.points[i][1] + d * cos(h)]
            })
            .collect();
        Self::new(pts)
    }

    pub fn translated(&self, d: Point) -> Self {
        Self::new(self.points.iter().map(|p| [p[0] + d[0], p[1] + d[1]]).collect())
    }

    /// Ribbon polygon of half-width `hw` around the curve.
    pub fn ribbon(&self, hw: f64) -> Polygon {
        let left = self.offset(hw);
        let right = self.offset(-hw);
        let mut pts: Vec<Point> = left.points.clone();
        pts.extend(right.points.iter().rev());
        Polygon::new(pts)
    }
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let l2 = dx * dx + dy * dy;
    let t = if l2 == 0.0 { 0.0 } else { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / l2).clamp(0.0, 1.0) };
    hypot(p[0] - (a[0] + t * dx), p[1] - (a[1] + t * dy))
}

/// Simple polygon, filled by the even-odd rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    points: Vec<Point>,
}

impl Polygon {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    /// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new(vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn contains(&self, p: Point) -> bool {
        let n = self.points.len();
        let mut inside = false;
        let mut j = n.wrapping_sub(1);
        for i in 0..n {
            let (a, b) = (self.points[i], self.points[j]);
            if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0] {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    /// `(min, max)` corners.
    pub fn bounds(&self) -> (Point, Point) {
        self.points.iter().fold(([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]), |(lo, hi), p| {
            ([lo[0].min(p[0]), lo[1].min(p[1])], [hi[0].max(p[0]), hi[1].max(p[1])])
        })
    }

    pub fn translated(&self, d: Point) -> Self {
        Self::new(self.points.iter().map(|p| [p[0] + d[0], p[1] + d[1]]).collect())
    }
}

/// Turtle-style builder for lane centerlines made of straights and arcs.
#[derive(Debug, Clone)]
pub struct PathBuilder {
    points: Vec<Point>,
    heading: f64,
    step: f64,
}

impl PathBuilder {
    pub fn new(start: Point, heading: f64) -> Self {
        Self { points: vec![start], heading, step: 0.5 }
    }

    fn pos(&self) -> Point {
        *self.points.last().expect("builder always holds a start point")
    }

    /// Straight segment to an exact point; the heading follows the segment.
    pub fn line_to(mut self, p: Point) -> Self {
        let q = self.pos();
        self.heading = atan2(p[1] - q[1], p[0] - q[0]);
        self.points.push(p);
        self
    }

    pub fn straight(mut self, length: f64) -> Self {
        let p = self.pos();
        self.points.push([p[0] + length * cos(self.heading), p[1] + length * sin(self.heading)]);
        self
    }

    /// Arc of `radius` sweeping `angle` radians (positive turns left).
    pub fn arc(mut self, radius: f64, angle: f64) -> Self {
        let n = (radius * angle.abs() / self.step).max(1.0) as usize + 1;
        let p = self.pos();
        let side = if angle >= 0.0 { 1.0 } else { -1.0 };
        let h0 = self.heading;
        let center = [p[0] - side * radius * sin(h0), p[1] + side * radius * cos(h0)];
        for i in 1..=n {
            let h = h0 + angle * i as f64 / n as f64;
            self.points.push([center[0] + side * radius * sin(h), center[1] - side * radius * cos(h)]);
        }
        self.heading = h0 + angle;
        self
    }

    pub fn build(self) -> Polyline {
        Polyline::new(self.points)
    }
}

/// Maps ego-centric world coordinates to continuous grid coordinates
/// `(x = column, y = row)`. Cell `(r, c)` spans `[c, c + 1) x [r, r + 1)`, and
/// the ego sits on the corner point `(ego_col, ego_row)` facing up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridFrame {
    pub height: usize,
    pub width: usize,
    pub resolution: f64,
    pub ego_row: usize,
    pub ego_col: usize,
}

impl GridFrame {
    pub fn to_grid(&self, p: Point) -> Point {
        [self.ego_col as f64 + p[0] / self.resolution, self.ego_row as f64 - p[1] / self.resolution]
    }

    pub fn to_world(&self, g: Point) -> Point {
        [(g[0] - self.ego_col as f64) * self.resolution, (self.ego_row as f64 - g[1]) * self.resolution]
    }

    /// World position of the center of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> Point {
        self.to_world([col as f64 + 0.5, row as f64 + 0.5])
    }

    /// Cell `(row, col)` containing a grid-frame point, if inside the grid.
    pub fn cell_of(&self, g: Point) -> Option<(usize, usize)> {
        let (c, r) = (floor(g[0]), floor(g[1]));
        (c >= 0.0 && r >= 0.0 && (c as usize) < self.width && (r as usize) < self.height).then_some((r as usize, c as usize))
    }
}
