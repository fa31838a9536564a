//! Planar geometry used by the scene, rasterizer and scorer.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    // rem_euclid maps -pi to pi already; guard the closed/open end anyway.
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Closest-point query result against a [`Polyline`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Arclength of the closest point.
    pub s: f64,
    /// Signed offset, positive to the left of the direction of travel.
    pub lateral: f64,
    /// Unsigned Euclidean distance to the polyline.
    pub distance: f64,
}

/// Polyline with cached cumulative arclength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<Point>", into = "Vec<Point>")]
pub struct Polyline {
    points: Vec<Point>,
    cum: Vec<f64>,
}

impl From<Vec<Point>> for Polyline {
    fn from(points: Vec<Point>) -> Self {
        let mut cum = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        for (i, p) in points.iter().enumerate() {
            if i > 0 {
                acc += points[i - 1].dist(*p);
            }
            cum.push(acc);
        }
        Self { points, cum }
    }
}

impl From<Polyline> for Vec<Point> {
    fn from(p: Polyline) -> Self {
        p.points
    }
}

impl Polyline {
    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        self.cum.last().copied().unwrap_or(0.0)
    }

    /// Cumulative arclength at each vertex.
    pub fn arclengths(&self) -> &[f64] {
        &self.cum
    }

    /// True when the polyline has at least two points and strictly increasing arclength.
    pub fn is_valid(&self) -> bool {
        self.points.len() >= 2 && self.cum.windows(2).all(|w| w[1] > w[0])
    }

    /// Closest point on the polyline; ties resolve to the earliest segment.
    pub fn project(&self, p: Point) -> Projection {
        let mut best = Projection {
            s: 0.0,
            lateral: 0.0,
            distance: f64::INFINITY,
        };
        for i in 0..self.points.len().saturating_sub(1) {
            let a = self.points[i];
            let b = self.points[i + 1];
            let (dx, dy) = (b.x - a.x, b.y - a.y);
            let len2 = dx * dx + dy * dy;
            let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0);
            let (cx, cy) = (a.x + t * dx, a.y + t * dy);
            let d = (p.x - cx).hypot(p.y - cy);
            if d < best.distance {
                let cross = dx * (p.y - a.y) - dy * (p.x - a.x);
                best = Projection {
                    s: self.cum[i] + t * len2.sqrt(),
                    lateral: if cross >= 0.0 { d } else { -d },
                    distance: d,
                };
            }
        }
        best
    }

    /// Position and tangent heading at arclength `s` (clamped to the polyline).
    pub fn pose_at(&self, s: f64) -> (Point, f64) {
        let s = s.clamp(0.0, self.length());
        let i = match self.cum.iter().position(|&c| c > s) {
            Some(0) => 0,
            Some(i) => i - 1,
            None => self.points.len() - 2,
        };
        let a = self.points[i];
        let b = self.points[i + 1];
        let seg = self.cum[i + 1] - self.cum[i];
        let t = ((s - self.cum[i]) / seg).clamp(0.0, 1.0);
        (
            Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)),
            (b.y - a.y).atan2(b.x - a.x),
        )
    }
}

/// Oriented rectangle (vehicle footprint at a pose).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: Point,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedBox {
    pub fn new(center: Point, heading: f64, length: f64, width: f64) -> Self {
        Self {
            center,
            heading,
            length,
            width,
        }
    }

    /// Corners in counter-clockwise order starting front-left.
    pub fn corners(&self) -> [Point; 4] {
        let (s, c) = self.heading.sin_cos();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        let at = |lx: f64, ly: f64| {
            Point::new(
                self.center.x + lx * c - ly * s,
                self.center.y + lx * s + ly * c,
            )
        };
        [at(hl, hw), at(-hl, hw), at(-hl, -hw), at(hl, -hw)]
    }

    /// Midpoint of the front edge.
    pub fn front(&self) -> Point {
        let (s, c) = self.heading.sin_cos();
        Point::new(
            self.center.x + self.length / 2.0 * c,
            self.center.y + self.length / 2.0 * s,
        )
    }

    /// Separating-axis overlap test. Touching boxes count as overlapping.
    pub fn overlaps(&self, other: &OrientedBox) -> bool {
        let a = self.corners();
        let b = other.corners();
        for h in [self.heading, other.heading] {
            let (s, c) = h.sin_cos();
            for axis in [(c, s), (-s, c)] {
                let proj = |pts: &[Point; 4]| {
                    pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                        let v = p.x * axis.0 + p.y * axis.1;
                        (lo.min(v), hi.max(v))
                    })
                };
                let (alo, ahi) = proj(&a);
                let (blo, bhi) = proj(&b);
                if ahi < blo || bhi < alo {
                    return false;
                }
            }
        }
        true
    }

    /// Position of `p` in this box's body frame (x forward, y left).
    pub fn to_local(&self, p: Point) -> Point {
        let (s, c) = self.heading.sin_cos();
        let (dx, dy) = (p.x - self.center.x, p.y - self.center.y);
        Point::new(dx * c + dy * s, -dx * s + dy * c)
    }

    pub fn contains(&self, p: Point) -> bool {
        let l = self.to_local(p);
        l.x.abs() <= self.length / 2.0 && l.y.abs() <= self.width / 2.0
    }
}
