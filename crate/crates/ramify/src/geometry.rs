//! Planar points and the segment queries used by every cost functional.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

/// A point (or vector) in the plane. Serialized as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl From<[f64; 2]> for Point {
    fn from(v: [f64; 2]) -> Self {
        Point { x: v[0], y: v[1] }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

impl Point {
    pub const ORIGIN: Point = Point { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dot(self, other: Point) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, other: Point) -> f64 {
        (self - other).norm()
    }

    pub fn lerp(self, other: Point, t: f64) -> Point {
        self + (other - self) * t
    }

    pub fn midpoint(self, other: Point) -> Point {
        Point::new(0.5 * (self.x + other.x), 0.5 * (self.y + other.y))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Rotation by `angle` radians about the origin.
    pub fn rotate(self, angle: f64) -> Point {
        let (s, c) = angle.sin_cos();
        Point::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }
}

impl Neg for Point {
    type Output = Point;
    fn neg(self) -> Point {
        Point::new(-self.x, -self.y)
    }
}

/// Closest point of segment `[a, b]` to `x`, as the clamped parameter `t`
/// with `closest = a + t (b - a)`.
pub fn closest_param(a: Point, b: Point, x: Point) -> f64 {
    let d = b - a;
    let len_sq = d.norm_sq();
    if len_sq == 0.0 {
        return 0.0;
    }
    ((x - a).dot(d) / len_sq).clamp(0.0, 1.0)
}

/// Squared distance from `x` to segment `[a, b]` with the clamped parameter
/// of the closest point.
pub fn point_segment_dist_sq(a: Point, b: Point, x: Point) -> (f64, f64) {
    let t = closest_param(a, b, x);
    ((x - a.lerp(b, t)).norm_sq(), t)
}

pub fn point_segment_dist(a: Point, b: Point, x: Point) -> f64 {
    point_segment_dist_sq(a, b, x).0.sqrt()
}

/// Minimum distance from `x` to a polyline, with the index of the closest
/// segment and the clamped parameter on it. A single-vertex polyline yields
/// the vertex distance with index 0.
pub fn point_polyline_dist_sq(vertices: &[Point], x: Point) -> (f64, usize, f64) {
    if vertices.len() == 1 {
        return ((x - vertices[0]).norm_sq(), 0, 0.0);
    }
    let mut best = (f64::INFINITY, 0, 0.0);
    for (i, w) in vertices.windows(2).enumerate() {
        let (d2, t) = point_segment_dist_sq(w[0], w[1], x);
        if d2 < best.0 {
            best = (d2, i, t);
        }
    }
    best
}

/// Total length of a polyline.
pub fn polyline_length(vertices: &[Point]) -> f64 {
    vertices.windows(2).map(|w| w[0].dist(w[1])).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_distance_regions() {
        let a = Point::new(0.0, 0.0);
        let b = Point::new(2.0, 0.0);
        assert_eq!(point_segment_dist(a, b, Point::new(1.0, 3.0)), 3.0);
        assert_eq!(point_segment_dist(a, b, Point::new(-3.0, 4.0)), 5.0);
        assert_eq!(point_segment_dist(a, b, Point::new(5.0, 4.0)), 5.0);
        assert_eq!(point_segment_dist(a, a, Point::new(3.0, 4.0)), 5.0);
    }

    #[test]
    fn polyline_picks_nearest_segment() {
        let v = [Point::new(0.0, 0.0), Point::new(1.0, 0.0), Point::new(1.0, 1.0)];
        let (d2, idx, t) = point_polyline_dist_sq(&v, Point::new(1.5, 0.75));
        assert!((d2 - 0.25).abs() < 1e-15);
        assert_eq!(idx, 1);
        assert!((t - 0.75).abs() < 1e-15);
        assert_eq!(polyline_length(&v), 2.0);
    }

    #[test]
    fn point_serializes_as_pair() {
        let s = serde_json::to_string(&Point::new(1.5, -2.0)).unwrap();
        assert_eq!(s, "[1.5,-2.0]");
        let p: Point = serde_json::from_str("[0.25,4]").unwrap();
        assert_eq!(p, Point::new(0.25, 4.0));
    }
}
