//! Oriented grasp rectangles and convex polygon clipping.
//!
//! A [`GraspRect`] is parameterised by its center, the direction `angle` of
//! the edges that the gripper plates lie along, the length `len` of those
//! edges and the plate separation `wid`. With `u = (cos a, sin a)` and
//! `v = (-sin a, cos a)` the corners are, in order,
//!
//! ```text
//! c - u*len/2 - v*wid/2,  c + u*len/2 - v*wid/2,
//! c + u*len/2 + v*wid/2,  c - u*len/2 + v*wid/2
//! ```
//!
//! so the first edge runs along `u` and is one of the two gripper-plate edges.
//! Image coordinates put `x` to the right and `y` down; pixel `(x, y)` sits at
//! integer coordinates.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Normalise an angle into `[0, pi)`.
pub fn normalize_angle(a: f64) -> f64 {
    let r = a.rem_euclid(PI);
    // rem_euclid can return exactly PI for inputs a hair below a multiple of PI.
    if r >= PI {
        0.0
    } else {
        r
    }
}

/// Smallest angle between two rectangle orientations, using their
/// pi-periodicity. Result lies in `[0, pi/2]`.
pub fn angle_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspRect {
    pub cx: f64,
    pub cy: f64,
    /// Direction of the gripper-plate edges, radians in `[0, pi)`.
    pub angle: f64,
    /// Length of the gripper-plate edges.
    pub len: f64,
    /// Plate separation.
    pub wid: f64,
}

impl GraspRect {
    /// Build a rectangle, normalising the angle. Fails on non-positive or
    /// non-finite sizes.
    pub fn new(cx: f64, cy: f64, angle: f64, len: f64, wid: f64) -> Result<Self> {
        if !(len > 0.0 && wid > 0.0 && len.is_finite() && wid.is_finite()) {
            return Err(Error::DegenerateRect);
        }
        if !(cx.is_finite() && cy.is_finite() && angle.is_finite()) {
            return Err(Error::invalid("rectangle parameters must be finite"));
        }
        Ok(GraspRect {
            cx,
            cy,
            angle: normalize_angle(angle),
            len,
            wid,
        })
    }

    /// Recover a rectangle from four corner points in the order described in
    /// the module docs. The first edge fixes the angle and `len`; the mean
    /// distance of the other two vertices from that edge gives `wid`.
    pub fn from_vertices(v: &[Point; 4]) -> Result<Self> {
        if v.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
            return Err(Error::invalid("vertex is not finite"));
        }
        let cx = v.iter().map(|p| p.x).sum::<f64>() / 4.0;
        let cy = v.iter().map(|p| p.y).sum::<f64>() / 4.0;
        let ex = v[1].x - v[0].x;
        let ey = v[1].y - v[0].y;
        let len = ex.hypot(ey);
        let wid = 0.5 * (v[1].dist(v[2]) + v[3].dist(v[0]));
        GraspRect::new(cx, cy, ey.atan2(ex), len, wid)
    }

    pub fn center(&self) -> Point {
        Point::new(self.cx, self.cy)
    }

    /// Unit vector along the gripper-plate edges.
    pub fn axis_u(&self) -> Point {
        Point::new(self.angle.cos(), self.angle.sin())
    }

    /// Unit vector across the plates, `u` rotated by +90 degrees.
    pub fn axis_v(&self) -> Point {
        Point::new(-self.angle.sin(), self.angle.cos())
    }

    pub fn corners(&self) -> [Point; 4] {
        let u = self.axis_u();
        let v = self.axis_v();
        let (hl, hw) = (0.5 * self.len, 0.5 * self.wid);
        let at = |su: f64, sv: f64| {
            Point::new(
                self.cx + su * hl * u.x + sv * hw * v.x,
                self.cy + su * hl * u.y + sv * hw * v.y,
            )
        };
        [at(-1.0, -1.0), at(1.0, -1.0), at(1.0, 1.0), at(-1.0, 1.0)]
    }

    pub fn area(&self) -> f64 {
        self.len * self.wid
    }

    /// Centers of the two gripper plates: `(left, right)` where left is
    /// `c - v*wid/2`, i.e. on the left when looking along `u` in image
    /// coordinates.
    pub fn plate_centers(&self) -> (Point, Point) {
        let v = self.axis_v();
        let hw = 0.5 * self.wid;
        (
            Point::new(self.cx - hw * v.x, self.cy - hw * v.y),
            Point::new(self.cx + hw * v.x, self.cy + hw * v.y),
        )
    }

    /// Axis-aligned bounding box `(xmin, ymin, xmax, ymax)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let c = self.corners();
        let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in c {
            b.0 = b.0.min(p.x);
            b.1 = b.1.min(p.y);
            b.2 = b.2.max(p.x);
            b.3 = b.3.max(p.y);
        }
        b
    }

    /// Whether any part of the rectangle overlaps the pixel area
    /// `[-0.5, width - 0.5] x [-0.5, height - 0.5]`.
    pub fn intersects_image(&self, width: usize, height: usize) -> bool {
        let frame = [
            Point::new(-0.5, -0.5),
            Point::new(width as f64 - 0.5, -0.5),
            Point::new(width as f64 - 0.5, height as f64 - 0.5),
            Point::new(-0.5, height as f64 - 0.5),
        ];
        convex_intersection_area(&self.corners(), &frame) > 0.0
    }
}

/// Signed area via the shoelace formula; positive for counter-clockwise
/// order in a y-up frame.
pub fn signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        s += a.x * b.y - b.x * a.y;
    }
    0.5 * s
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Sutherland-Hodgman clipping of `subject` against the convex polygon
/// `clip`. Both polygons may be given in either orientation.
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let orient = signed_area(clip).signum();
    if orient == 0.0 {
        return Vec::new();
    }
    let mut output: Vec<Point> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let inside = |p: Point| orient * cross(a, b, p) >= 0.0;
        let input = std::mem::take(&mut output);
        let m = input.len();
        for k in 0..m {
            let cur = input[k];
            let prev = input[(k + m - 1) % m];
            let cur_in = inside(cur);
            let prev_in = inside(prev);
            if cur_in {
                if !prev_in {
                    output.push(segment_line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(segment_line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

fn segment_line_intersection(p: Point, q: Point, a: Point, b: Point) -> Point {
    let cp = cross(a, b, p);
    let cq = cross(a, b, q);
    let denom = cp - cq;
    if denom == 0.0 {
        return q;
    }
    let t = cp / denom;
    Point::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
}

/// Area of the intersection of two convex polygons.
pub fn convex_intersection_area(a: &[Point], b: &[Point]) -> f64 {
    signed_area(&clip_convex(a, b)).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn axis_aligned_vertices() {
        let v = [
            Point::new(0.0, 0.0),
            Point::new(4.0, 0.0),
            Point::new(4.0, 2.0),
            Point::new(0.0, 2.0),
        ];
        let r = GraspRect::from_vertices(&v).unwrap();
        assert_abs_diff_eq!(r.cx, 2.0);
        assert_abs_diff_eq!(r.cy, 1.0);
        assert_abs_diff_eq!(r.angle, 0.0);
        assert_abs_diff_eq!(r.len, 4.0);
        assert_abs_diff_eq!(r.wid, 2.0);
        for (a, b) in r.corners().iter().zip(v.iter()) {
            assert_abs_diff_eq!(a.x, b.x, epsilon = 1e-12);
            assert_abs_diff_eq!(a.y, b.y, epsilon = 1e-12);
        }
    }

    #[test]
    fn rotated_vertices() {
        // The same rectangle rotated by +90 degrees about the origin.
        let v = [
            Point::new(0.0, 0.0),
            Point::new(0.0, 4.0),
            Point::new(-2.0, 4.0),
            Point::new(-2.0, 0.0),
        ];
        let r = GraspRect::from_vertices(&v).unwrap();
        assert_abs_diff_eq!(r.angle, PI / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.len, 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.wid, 2.0, epsilon = 1e-12);
        let (x0, y0, x1, y1) = r.bounds();
        // Extent along x is now the plate separation, along y the plate length.
        assert_abs_diff_eq!(x1 - x0, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y1 - y0, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn angle_helpers() {
        assert_abs_diff_eq!(normalize_angle(-0.1), PI - 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(normalize_angle(PI + 0.2), 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(angle_distance(0.05, PI - 0.05), 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(angle_distance(0.0, PI / 2.0), PI / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_degenerate() {
        assert!(matches!(
            GraspRect::new(0.0, 0.0, 0.0, 0.0, 1.0),
            Err(Error::DegenerateRect)
        ));
        assert!(GraspRect::new(f64::NAN, 0.0, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn clipping_squares() {
        let a = GraspRect::new(0.0, 0.0, 0.0, 1.0, 1.0).unwrap();
        let b = GraspRect::new(0.5, 0.0, 0.0, 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(
            convex_intersection_area(&a.corners(), &b.corners()),
            0.5,
            epsilon = 1e-12
        );
        let far = GraspRect::new(5.0, 0.0, 0.0, 1.0, 1.0).unwrap();
        assert_eq!(convex_intersection_area(&a.corners(), &far.corners()), 0.0);
    }

    #[test]
    fn plates_sit_on_long_edges() {
        let r = GraspRect::new(10.0, 10.0, 0.0, 20.0, 6.0).unwrap();
        let (l, rt) = r.plate_centers();
        assert_abs_diff_eq!(l.y, 7.0);
        assert_abs_diff_eq!(rt.y, 13.0);
        assert_abs_diff_eq!(l.x, 10.0);
    }

    #[test]
    fn image_overlap() {
        let r = GraspRect::new(-20.0, 5.0, 0.0, 4.0, 4.0).unwrap();
        assert!(!r.intersects_image(10, 10));
        let r = GraspRect::new(-1.0, 5.0, 0.0, 4.0, 4.0).unwrap();
        assert!(r.intersects_image(10, 10));
    }
}
