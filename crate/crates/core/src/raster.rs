//! Scene rasterization into a bird's-eye feature grid, and bilinear sampling.
//!
//! Channel layout (`C = 3 + occupancy_buckets`):
//!
//! | index        | meaning                                                    |
//! |--------------|------------------------------------------------------------|
//! | 0            | drivable mask (cell center inside the corridor)            |
//! | 1            | signed lateral offset from the centerline / 5 m, clamped   |
//! | 2 .. 2+B     | agent occupancy, one channel per future-step bucket        |
//! | 2+B          | red-signal field: 1 past the stop line, ramping up before  |

use crate::config::WorldConfig;
use crate::geometry::{OrientedBox, Point};
use crate::scene::{LightState, Scene};

pub const CH_DRIVABLE: usize = 0;
pub const CH_LATERAL: usize = 1;
pub const CH_OCCUPANCY: usize = 2;
const LATERAL_SCALE: f64 = 5.0;
const LIGHT_RAMP: f64 = 30.0;

pub fn channel_count(cfg: &WorldConfig) -> usize {
    3 + cfg.occupancy_buckets
}

/// Occupancy bucket for simulation step `k` (1-based future steps).
pub fn bucket_of_step(k: usize, cfg: &WorldConfig) -> usize {
    ((k - 1) * cfg.occupancy_buckets / cfg.horizon).min(cfg.occupancy_buckets - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    /// Lower-left corner of cell (0, 0).
    pub origin: Point,
    pub cell: f64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel-major `[c][row][col]`.
    pub data: Vec<f64>,
}

impl FeatureGrid {
    fn zeros(origin: Point, cell: f64, channels: usize, height: usize, width: usize) -> Self {
        Self {
            origin,
            cell,
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    fn idx(&self, c: usize, row: usize, col: usize) -> usize {
        (c * self.height + row) * self.width + col
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[self.idx(c, row, col)]
    }

    fn set(&mut self, c: usize, row: usize, col: usize, v: f64) {
        let i = self.idx(c, row, col);
        self.data[i] = v;
    }

    pub fn cell_center(&self, row: usize, col: usize) -> Point {
        Point::new(
            self.origin.x + (col as f64 + 0.5) * self.cell,
            self.origin.y + (row as f64 + 0.5) * self.cell,
        )
    }

    /// Row and column of the cell containing `p`, if inside the grid.
    pub fn cell_of(&self, p: Point) -> Option<(usize, usize)> {
        let fx = (p.x - self.origin.x) / self.cell;
        let fy = (p.y - self.origin.y) / self.cell;
        if fx < 0.0 || fy < 0.0 {
            return None;
        }
        let (col, row) = (fx.floor() as usize, fy.floor() as usize);
        (col < self.width && row < self.height).then_some((row, col))
    }

    /// Bilinear interpolation between cell centers; zero vector outside the grid.
    pub fn sample(&self, p: Point) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.sample_into(p, &mut out);
        out
    }

    pub fn sample_into(&self, p: Point, out: &mut [f64]) {
        let w = self.width as f64 * self.cell;
        let h = self.height as f64 * self.cell;
        let (lx, ly) = (p.x - self.origin.x, p.y - self.origin.y);
        if !(0.0..=w).contains(&lx) || !(0.0..=h).contains(&ly) {
            out.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        let fx = (lx / self.cell - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (ly / self.cell - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (c0, r0) = (fx.floor() as usize, fy.floor() as usize);
        let (c1, r1) = ((c0 + 1).min(self.width - 1), (r0 + 1).min(self.height - 1));
        let (tx, ty) = (fx - c0 as f64, fy - r0 as f64);
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            let v00 = self.get(c, r0, c0);
            let v01 = self.get(c, r0, c1);
            let v10 = self.get(c, r1, c0);
            let v11 = self.get(c, r1, c1);
            // Skip zero-weight corners so exact cell-center lookups stay exact.
            let mut acc = v00 * (1.0 - tx) * (1.0 - ty);
            if tx > 0.0 {
                acc += v01 * tx * (1.0 - ty);
            }
            if ty > 0.0 {
                acc += v10 * (1.0 - tx) * ty;
                if tx > 0.0 {
                    acc += v11 * tx * ty;
                }
            }
            *o = acc;
        }
    }
}

/// Free-function form of [`FeatureGrid::sample`].
pub fn sample_feature(grid: &FeatureGrid, p: Point) -> Vec<f64> {
    grid.sample(p)
}

/// Rasterizes the corridor bounding box padded by `grid_pad`.
pub fn rasterize(scene: &Scene, cfg: &WorldConfig) -> FeatureGrid {
    let hw = scene.corridor_halfwidth;
    let pts = scene.centerline.points();
    let (mut x0, mut y0, mut x1, mut y1) = (
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    );
    for p in pts {
        x0 = x0.min(p.x - hw);
        y0 = y0.min(p.y - hw);
        x1 = x1.max(p.x + hw);
        y1 = y1.max(p.y + hw);
    }
    let pad = cfg.grid_pad;
    let cell = cfg.grid_cell;
    let origin = Point::new(x0 - pad, y0 - pad);
    let width = ((x1 - x0 + 2.0 * pad) / cell).ceil() as usize;
    let height = ((y1 - y0 + 2.0 * pad) / cell).ceil() as usize;
    let mut grid = FeatureGrid::zeros(origin, cell, channel_count(cfg), height, width);

    stamp_centerline(&mut grid, scene);

    let n_buckets = cfg.occupancy_buckets;
    for agent in &scene.agents {
        for k in 1..agent.poses.len().min(cfg.horizon + 1) {
            let ch = CH_OCCUPANCY + bucket_of_step(k, cfg);
            stamp_box(&mut grid, ch, &agent.box_at(k));
            if let Some((r, c)) = grid.cell_of(agent.poses[k].point()) {
                grid.set(ch, r, c, 1.0);
            }
        }
    }

    if let Some(light) = scene.light.filter(|l| l.state == LightState::Red) {
        let ch = CH_OCCUPANCY + n_buckets;
        for row in 0..height {
            for col in 0..width {
                if grid.get(CH_DRIVABLE, row, col) == 0.0 {
                    continue;
                }
                let s = scene.centerline.project(grid.cell_center(row, col)).s;
                let v = (1.0 - (light.stopline_s - s) / LIGHT_RAMP).clamp(0.0, 1.0);
                grid.set(ch, row, col, v);
            }
        }
    }
    grid
}

/// Fills the drivable and lateral channels by stamping each centerline
/// segment over the cells within reach, keeping the nearest segment per cell.
fn stamp_centerline(grid: &mut FeatureGrid, scene: &Scene) {
    let hw = scene.corridor_halfwidth;
    let reach = hw.max(LATERAL_SCALE) + grid.cell;
    let n = grid.height * grid.width;
    let mut best = vec![f64::INFINITY; n];
    let pts = scene.centerline.points();
    for seg in pts.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        let len2 = dx * dx + dy * dy;
        let lo = Point::new(a.x.min(b.x) - reach, a.y.min(b.y) - reach);
        let hi = Point::new(a.x.max(b.x) + reach, a.y.max(b.y) + reach);
        let c0 = (((lo.x - grid.origin.x) / grid.cell).floor().max(0.0)) as usize;
        let r0 = (((lo.y - grid.origin.y) / grid.cell).floor().max(0.0)) as usize;
        let c1 = (((hi.x - grid.origin.x) / grid.cell).ceil() as usize).min(grid.width);
        let r1 = (((hi.y - grid.origin.y) / grid.cell).ceil() as usize).min(grid.height);
        for row in r0..r1 {
            for col in c0..c1 {
                let p = grid.cell_center(row, col);
                let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0);
                let d = (p.x - a.x - t * dx).hypot(p.y - a.y - t * dy);
                let i = row * grid.width + col;
                if d < best[i] {
                    best[i] = d;
                    let cross = dx * (p.y - a.y) - dy * (p.x - a.x);
                    let signed = if cross >= 0.0 { d } else { -d };
                    grid.set(CH_DRIVABLE, row, col, if d <= hw { 1.0 } else { 0.0 });
                    grid.set(
                        CH_LATERAL,
                        row,
                        col,
                        (signed / LATERAL_SCALE).clamp(-1.0, 1.0),
                    );
                }
            }
        }
    }
}

/// Marks every cell whose center lies inside `b`.
fn stamp_box(grid: &mut FeatureGrid, ch: usize, b: &OrientedBox) {
    let corners = b.corners();
    let (mut lo_x, mut lo_y, mut hi_x, mut hi_y) = (
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    );
    for c in &corners {
        lo_x = lo_x.min(c.x);
        lo_y = lo_y.min(c.y);
        hi_x = hi_x.max(c.x);
        hi_y = hi_y.max(c.y);
    }
    let c0 = ((lo_x - grid.origin.x) / grid.cell).floor().max(0.0) as usize;
    let r0 = ((lo_y - grid.origin.y) / grid.cell).floor().max(0.0) as usize;
    let c1 = (((hi_x - grid.origin.x) / grid.cell).ceil().max(0.0) as usize).min(grid.width);
    let r1 = (((hi_y - grid.origin.y) / grid.cell).ceil().max(0.0) as usize).min(grid.height);
    for row in r0..r1 {
        for col in c0..c1 {
            if b.contains(grid.cell_center(row, col)) {
                grid.set(ch, row, col, 1.0);
            }
        }
    }
}
