//! Rotated box footprints and exact convex-polygon overlap.

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// A point in the ego ground plane, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Signed shoelace area; positive for counterclockwise vertex order.
pub fn signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        s += p.x * q.y - q.x * p.y;
    }
    0.5 * s
}

/// Bird's-eye footprint of a box: four counterclockwise corners, plus the
/// vertical extent kept for the 3D variant.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxPolygon {
    corners: [Point; 4],
    pub z: f64,
    pub h: f64,
}

impl BoxPolygon {
    /// Footprint of a box centered at `(x, y)` with length `l` along the
    /// heading `yaw` and width `w` across it.
    pub fn new(x: f64, y: f64, w: f64, l: f64, yaw: f64) -> Result<Self> {
        Self::with_height(x, y, 0.0, w, l, 1.0, yaw)
    }

    pub fn with_height(x: f64, y: f64, z: f64, w: f64, l: f64, h: f64, yaw: f64) -> Result<Self> {
        if !(w > 0.0 && l > 0.0 && h > 0.0) || ![x, y, z, w, l, h, yaw].iter().all(|v| v.is_finite())
        {
            return Err(Error::DegenerateBox);
        }
        let (s, c) = (libm::sin(yaw), libm::cos(yaw));
        let local = [(0.5 * l, 0.5 * w), (-0.5 * l, 0.5 * w), (-0.5 * l, -0.5 * w), (0.5 * l, -0.5 * w)];
        let corners = local.map(|(u, v)| Point::new(x + c * u - s * v, y + s * u + c * v));
        Ok(Self { corners, z, h })
    }

    pub fn corners(&self) -> &[Point; 4] {
        &self.corners
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.corners)
    }

    pub fn volume(&self) -> f64 {
        self.area() * self.h
    }

    /// Whether `p` lies inside or on the boundary.
    pub fn contains(&self, p: Point) -> bool {
        (0..4).all(|i| cross(self.corners[i], self.corners[(i + 1) % 4], p) >= 0.0)
    }
}

/// Sutherland–Hodgman clipping of a polygon against one directed edge; the
/// kept half-plane lies to the left of `a → b`.
fn clip_half_plane(poly: &[Point], a: Point, b: Point) -> Vec<Point> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    let n = poly.len();
    for i in 0..n {
        let cur = poly[i];
        let prev = poly[(i + n - 1) % n];
        let d_cur = cross(a, b, cur);
        let d_prev = cross(a, b, prev);
        if d_cur >= 0.0 {
            if d_prev < 0.0 {
                out.push(intersect(prev, cur, d_prev, d_cur));
            }
            out.push(cur);
        } else if d_prev >= 0.0 {
            out.push(intersect(prev, cur, d_prev, d_cur));
        }
    }
    out
}

fn intersect(p: Point, q: Point, dp: f64, dq: f64) -> Point {
    let t = dp / (dp - dq);
    Point::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
}

/// Intersection of two convex counterclockwise polygons.
pub fn convex_intersection(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut poly = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if poly.is_empty() {
            break;
        }
        poly = clip_half_plane(&poly, clip[i], clip[(i + 1) % n]);
    }
    poly
}

/// Area shared by two footprints.
pub fn intersection_area(a: &BoxPolygon, b: &BoxPolygon) -> f64 {
    signed_area(&convex_intersection(&a.corners, &b.corners)).max(0.0)
}

/// Intersection over union of two bird's-eye footprints, in `[0, 1]`.
pub fn bev_iou(a: &BoxPolygon, b: &BoxPolygon) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Volumetric IoU of two upright boxes: footprint overlap times vertical
/// overlap.
pub fn iou_3d(a: &BoxPolygon, b: &BoxPolygon) -> f64 {
    let bottom = (a.z - 0.5 * a.h).max(b.z - 0.5 * b.h);
    let top = (a.z + 0.5 * a.h).min(b.z + 0.5 * b.h);
    let dz = (top - bottom).max(0.0);
    let inter = intersection_area(a, b) * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Which overlap measure pairs predicted and reference boxes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IouKind {
    #[default]
    Bev,
    Volume,
}

impl IouKind {
    pub fn eval(self, a: &BoxPolygon, b: &BoxPolygon) -> f64 {
        match self {
            IouKind::Bev => bev_iou(a, b),
            IouKind::Volume => iou_3d(a, b),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::PI;
    use proptest::prelude::*;

    #[test]
    fn identical_disjoint_and_offset_squares() {
        let a = BoxPolygon::new(0.0, 0.0, 1.0, 1.0, 0.0).unwrap();
        assert!((bev_iou(&a, &a) - 1.0).abs() < 1e-12);
        let far = BoxPolygon::new(5.0, 0.0, 1.0, 1.0, 0.3).unwrap();
        assert_eq!(bev_iou(&a, &far), 0.0);
        let shifted = BoxPolygon::new(0.5, 0.0, 1.0, 1.0, 0.0).unwrap();
        assert!((bev_iou(&a, &shifted) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn corners_are_counterclockwise_with_expected_area() {
        let b = BoxPolygon::new(1.0, -2.0, 2.0, 4.5, 2.3).unwrap();
        assert!((b.area() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_boxes_are_rejected() {
        assert_eq!(BoxPolygon::new(0.0, 0.0, 0.0, 1.0, 0.0), Err(Error::DegenerateBox));
        assert_eq!(BoxPolygon::new(0.0, 0.0, 1.0, -1.0, 0.0), Err(Error::DegenerateBox));
    }

    #[test]
    fn rotated_square_by_quarter_turn_is_identical() {
        let a = BoxPolygon::new(0.0, 0.0, 2.0, 2.0, 0.0).unwrap();
        let b = BoxPolygon::new(0.0, 0.0, 2.0, 2.0, PI / 2.0).unwrap();
        assert!((bev_iou(&a, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn volume_iou_accounts_for_height() {
        let a = BoxPolygon::with_height(0.0, 0.0, 1.0, 1.0, 1.0, 2.0, 0.0).unwrap();
        let b = BoxPolygon::with_height(0.0, 0.0, 2.0, 1.0, 1.0, 2.0, 0.0).unwrap();
        // vertical overlap 1 of 2 each: inter 1, union 3
        assert!((iou_3d(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert!((bev_iou(&a, &b) - 1.0).abs() < 1e-12);
    }

    fn arb_box() -> impl Strategy<Value = BoxPolygon> {
        (-3.0f64..3.0, -3.0f64..3.0, 0.2f64..4.0, 0.2f64..4.0, -PI..PI)
            .prop_map(|(x, y, w, l, yaw)| BoxPolygon::new(x, y, w, l, yaw).unwrap())
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = bev_iou(&a, &b);
            let ba = bev_iou(&b, &a);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!((bev_iou(&a, &a) - 1.0).abs() < 1e-9);
        }

        #[test]
        fn iou_below_one_for_distinct_boxes(a in arb_box(), dx in 0.01f64..1.0) {
            let c = a.corners();
            let cx = (c[0].x + c[2].x) / 2.0 + dx;
            let cy = (c[0].y + c[2].y) / 2.0;
            let w = ((c[1].x - c[2].x).powi(2) + (c[1].y - c[2].y).powi(2)).sqrt();
            let l = ((c[0].x - c[1].x).powi(2) + (c[0].y - c[1].y).powi(2)).sqrt();
            let yaw = (c[0].y - c[1].y).atan2(c[0].x - c[1].x);
            let b = BoxPolygon::new(cx, cy, w, l, yaw).unwrap();
            prop_assert!(bev_iou(&a, &b) < 1.0 - 1e-9);
        }
    }
}
