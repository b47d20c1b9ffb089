//! Oriented BEV boxes and exact rotated IoU by convex polygon clipping.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::geometry::Pose2;

/// Oriented box in a planar frame; `l` runs along the heading `yaw`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxBEV {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub l: f64,
    pub yaw: f64,
}

/// Wrap into `(-π/2, π/2]`.
pub fn normalize_half_angle(a: f64) -> f64 {
    let mut r = a % PI;
    if r <= -FRAC_PI_2 {
        r += PI;
    } else if r > FRAC_PI_2 {
        r -= PI;
    }
    r
}

impl BoxBEV {
    /// Canonical form: `w ≤ l`, yaw in `(-π/2, π/2]`.
    pub fn new(cx: f64, cy: f64, w: f64, l: f64, yaw: f64) -> Self {
        Self { cx, cy, w, l, yaw }.canonical()
    }

    pub fn canonical(self) -> Self {
        let (w, l, yaw) = if self.w > self.l { (self.l, self.w, self.yaw + FRAC_PI_2) } else { (self.w, self.l, self.yaw) };
        Self { cx: self.cx, cy: self.cy, w, l, yaw: normalize_half_angle(yaw) }
    }

    pub fn area(&self) -> f64 {
        self.w * self.l
    }

    /// Corners counter-clockwise.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(u, v)| (self.cx + c * u - s * v, self.cy + s * u + c * v))
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        u.abs() <= self.l / 2.0 && v.abs() <= self.w / 2.0
    }

    /// Re-express a box given in `from`'s frame in `to`'s frame.
    pub fn transform(&self, from: &Pose2, to: &Pose2) -> BoxBEV {
        let (wx, wy) = from.to_world(self.cx, self.cy);
        let (x, y) = to.to_local(wx, wy);
        BoxBEV::new(x, y, self.w, self.l, self.yaw + from.yaw - to.yaw)
    }

    /// Bounding radius around the center.
    pub fn radius(&self) -> f64 {
        0.5 * self.w.hypot(self.l)
    }
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Sutherland–Hodgman clip of `subject` by the convex counter-clockwise `clip`.
pub fn clip_polygon(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = subject.to_vec();
    for k in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[k], clip[(k + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for i in 0..input.len() {
            let (p, q) = (input[i], input[(i + 1) % input.len()]);
            let (dp, dq) = (cross(a, b, p), cross(a, b, q));
            if dp >= 0.0 {
                out.push(p);
            }
            if (dp >= 0.0) != (dq >= 0.0) {
                let t = dp / (dp - dq);
                out.push((p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1)));
            }
        }
    }
    out
}

pub fn polygon_area(p: &[(f64, f64)]) -> f64 {
    let n = p.len();
    if n < 3 {
        return 0.0;
    }
    0.5 * (0..n).map(|i| p[i].0 * p[(i + 1) % n].1 - p[(i + 1) % n].0 * p[i].1).sum::<f64>()
}

const MIN_AREA: f64 = 1e-12;

pub fn intersection_area(a: &BoxBEV, b: &BoxBEV) -> f64 {
    if (a.cx - b.cx).hypot(a.cy - b.cy) > a.radius() + b.radius() {
        return 0.0;
    }
    polygon_area(&clip_polygon(&a.corners(), &b.corners())).max(0.0)
}

/// Intersection over union; degenerate boxes give 0.
pub fn rotated_iou(a: &BoxBEV, b: &BoxBEV) -> f64 {
    if a.area() < MIN_AREA || b.area() < MIN_AREA {
        return 0.0;
    }
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union < MIN_AREA {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}
