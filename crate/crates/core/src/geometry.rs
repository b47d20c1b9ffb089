//! SE(2) poses, BEV grids, bilinear feature warping and field-of-view masks.
//!
//! Frames are x-forward, y-left, yaw counter-clockwise. Grid row `r` runs
//! along x and column `c` along y; the grid is centered on its owner, so the
//! center of cell `(r, c)` sits at `((r + 0.5 - H/2)·res, (c + 0.5 - W/2)·res)`.

use std::f64::consts::PI;
use std::sync::Arc;

use coperc_tensor::{RowMap, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Wrap an angle into `(-π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw: normalize_angle(yaw) }
    }

    pub fn identity() -> Self {
        Self { x: 0.0, y: 0.0, yaw: 0.0 }
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.yaw.is_finite() && self.yaw > -PI && self.yaw <= PI
    }

    /// Local coordinates of this pose's frame to world coordinates.
    pub fn to_world(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (self.x + c * x - s * y, self.y + s * x + c * y)
    }

    /// World coordinates to this pose's local frame.
    pub fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.x, y - self.y);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    pub fn distance(&self, other: &Pose2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// 2×3 affine map `p ↦ A·p + t`, stored row-major as `[[a00, a01, t0], [a10, a11, t1]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine2 {
    pub m: [[f64; 3]; 2],
}

impl Affine2 {
    pub fn identity() -> Self {
        Self { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]] }
    }

    pub fn from_rotation_translation(theta: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self { m: [[c, -s, tx], [s, c, ty]] }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        (m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2])
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Affine2) -> Affine2 {
        let (a, b) = (&self.m, &other.m);
        let mut m = [[0.0; 3]; 2];
        for i in 0..2 {
            for j in 0..3 {
                m[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
            m[i][2] += a[i][2];
        }
        Affine2 { m }
    }

    pub fn inverse(&self) -> Result<Affine2> {
        let m = &self.m;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-300 || !det.is_finite() {
            return Err(CoreError::Geometry("singular transform".into()));
        }
        let (i00, i01, i10, i11) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
        Ok(Affine2 {
            m: [
                [i00, i01, -(i00 * m[0][2] + i01 * m[1][2])],
                [i10, i11, -(i10 * m[0][2] + i11 * m[1][2])],
            ],
        })
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().flatten().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Affine2) -> f64 {
        self.m.iter().flatten().zip(other.m.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Map receiver-frame coordinates to sender-frame coordinates.
///
/// `relative_transform(p, p)` is exactly the identity.
pub fn relative_transform(receiver: &Pose2, sender: &Pose2) -> Affine2 {
    let theta = receiver.yaw - sender.yaw;
    let (s, c) = sender.yaw.sin_cos();
    let (dx, dy) = (receiver.x - sender.x, receiver.y - sender.y);
    Affine2::from_rotation_translation(theta, c * dx + s * dy, -s * dx + c * dy)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevGrid {
    pub h: usize,
    pub w: usize,
    /// Meters per cell.
    pub resolution: f64,
}

impl BevGrid {
    pub fn new(h: usize, w: usize, resolution: f64) -> Result<Self> {
        if h == 0 || w == 0 || !(resolution > 0.0 && resolution.is_finite()) {
            return Err(CoreError::Config(format!("invalid grid {h}x{w} at {resolution} m")));
        }
        Ok(Self { h, w, resolution })
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    /// Extent along x and y in meters.
    pub fn extent(&self) -> (f64, f64) {
        (self.h as f64 * self.resolution, self.w as f64 * self.resolution)
    }

    pub fn cell_center(&self, r: usize, c: usize) -> (f64, f64) {
        (
            (r as f64 + 0.5 - self.h as f64 / 2.0) * self.resolution,
            (c as f64 + 0.5 - self.w as f64 / 2.0) * self.resolution,
        )
    }

    /// Continuous cell coordinates of a metric point (cell centers are integers).
    pub fn to_cell(&self, x: f64, y: f64) -> (f64, f64) {
        (x / self.resolution + self.h as f64 / 2.0 - 0.5, y / self.resolution + self.w as f64 / 2.0 - 0.5)
    }

    /// Cell containing a metric point, if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let r = (x / self.resolution + self.h as f64 / 2.0).floor();
        let c = (y / self.resolution + self.w as f64 / 2.0).floor();
        (r >= 0.0 && c >= 0.0 && r < self.h as f64 && c < self.w as f64).then(|| (r as usize, c as usize))
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (ex, ey) = self.extent();
        x.abs() < ex / 2.0 && y.abs() < ey / 2.0
    }
}

/// Sample positions this close to an integer are treated as exact cell hits.
const SNAP: f64 = 1e-9;

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

/// Precomputed bilinear resampling from a sender grid into a receiver grid.
#[derive(Clone, Debug)]
pub struct WarpPlan {
    /// Receiver cells × sender cells sampling weights.
    pub map: Arc<RowMap>,
    /// True where every nonzero-weight corner lies inside the sender grid.
    pub mask: Vec<bool>,
}

impl WarpPlan {
    pub fn identity(grid: &BevGrid) -> Self {
        let n = grid.cells();
        Self { map: Arc::new(RowMap::gather(&(0..n).collect::<Vec<_>>(), n)), mask: vec![true; n] }
    }
}

/// Build the bilinear sampling plan for `T` (receiver → sender coordinates).
///
/// Invalid cells get an empty row, so their warped value is exactly zero.
pub fn warp_plan(t: &Affine2, grid: &BevGrid) -> Result<WarpPlan> {
    if !t.is_finite() {
        return Err(CoreError::Geometry("non-finite transform".into()));
    }
    let (h, w) = (grid.h as isize, grid.w as isize);
    let mut map = RowMap::new(grid.cells());
    let mut mask = Vec::with_capacity(grid.cells());
    for r in 0..grid.h {
        for c in 0..grid.w {
            let (x, y) = grid.cell_center(r, c);
            let (sx, sy) = t.apply(x, y);
            let (sr, sc) = grid.to_cell(sx, sy);
            let (sr, sc) = (snap(sr), snap(sc));
            let (r0, c0) = (sr.floor(), sc.floor());
            let (fr, fc) = (sr - r0, sc - c0);
            let (r0, c0) = (r0 as isize, c0 as isize);
            let corners = [
                (r0, c0, (1.0 - fr) * (1.0 - fc)),
                (r0, c0 + 1, (1.0 - fr) * fc),
                (r0 + 1, c0, fr * (1.0 - fc)),
                (r0 + 1, c0 + 1, fr * fc),
            ];
            let inside = corners.iter().all(|&(rr, cc, wt)| wt == 0.0 || (rr >= 0 && cc >= 0 && rr < h && cc < w));
            if inside && sr.is_finite() && sc.is_finite() {
                let entries: Vec<(usize, f64)> = corners
                    .iter()
                    .filter(|e| e.2 != 0.0)
                    .map(|&(rr, cc, wt)| ((rr * w + cc) as usize, wt))
                    .collect();
                map.push_row(&entries);
            } else {
                map.push_row(&[]);
            }
            mask.push(inside);
        }
    }
    Ok(WarpPlan { map: Arc::new(map), mask })
}

/// Warp a sender feature map `[H, W, C]` into the receiver frame.
pub fn warp_feature(f: &Tensor, t: &Affine2, grid: &BevGrid) -> Result<(Tensor, Vec<bool>)> {
    let s = f.shape();
    if s.len() != 3 || s[0] != grid.h || s[1] != grid.w {
        return Err(CoreError::Shape(format!("feature {s:?} does not match grid {}x{}", grid.h, grid.w)));
    }
    let plan = warp_plan(t, grid)?;
    let out = plan.map.apply(f.data(), s[2]);
    Ok((Tensor::new(s.to_vec(), out)?, plan.mask))
}

/// Receiver cells whose centers lie within `fov_radius` of the sender and
/// inside the sender's grid after warping.
pub fn fov_mask(grid: &BevGrid, sender: &Pose2, receiver: &Pose2, fov_radius: f64) -> Result<Vec<bool>> {
    if !(fov_radius > 0.0) {
        return Err(CoreError::Config(format!("fov radius must be positive, got {fov_radius}")));
    }
    let plan = warp_plan(&relative_transform(receiver, sender), grid)?;
    Ok(combine_fov(grid, &plan.mask, sender, receiver, fov_radius))
}

fn combine_fov(grid: &BevGrid, inbounds: &[bool], sender: &Pose2, receiver: &Pose2, radius: f64) -> Vec<bool> {
    let mut out = Vec::with_capacity(grid.cells());
    for r in 0..grid.h {
        for c in 0..grid.w {
            let (x, y) = grid.cell_center(r, c);
            let (wx, wy) = receiver.to_world(x, y);
            let d = (wx - sender.x).hypot(wy - sender.y);
            out.push(inbounds[r * grid.w + c] && d <= radius);
        }
    }
    out
}

/// Warp plan restricted to the sender's field of view: rows outside the FoV
/// disc are emptied so masked cells carry exactly zero.
pub fn masked_warp_plan(grid: &BevGrid, sender: &Pose2, receiver: &Pose2, fov_radius: f64) -> Result<WarpPlan> {
    let plan = warp_plan(&relative_transform(receiver, sender), grid)?;
    let mask = combine_fov(grid, &plan.mask, sender, receiver, fov_radius);
    let mut map = RowMap::new(grid.cells());
    for (r, &ok) in mask.iter().enumerate() {
        if ok {
            map.push_row(&plan.map.row(r).collect::<Vec<_>>());
        } else {
            map.push_row(&[]);
        }
    }
    Ok(WarpPlan { map: Arc::new(map), mask })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn angle_normalization_range() {
        assert_eq!(normalize_angle(PI), PI);
        assert!((normalize_angle(-PI) - PI).abs() < 1e-15);
        assert!((normalize_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
        assert_eq!(normalize_angle(0.25), 0.25);
    }

    #[test]
    fn pose_world_local_roundtrip() {
        let p = Pose2::new(3.0, -2.0, 0.7);
        let (wx, wy) = p.to_world(1.5, 2.5);
        let (lx, ly) = p.to_local(wx, wy);
        assert!((lx - 1.5).abs() < 1e-12 && (ly - 2.5).abs() < 1e-12);
    }

    #[test]
    fn affine_inverse() {
        let t = Affine2::from_rotation_translation(0.3, 1.0, -4.0);
        let id = t.compose(&t.inverse().unwrap());
        assert!(id.max_abs_diff(&Affine2::identity()) < 1e-12);
    }

    #[test]
    fn grid_cell_lookup() {
        let g = BevGrid::new(4, 4, 1.0).unwrap();
        assert_eq!(g.cell_center(0, 0), (-1.5, -1.5));
        assert_eq!(g.cell_of(-1.5, -1.5), Some((0, 0)));
        assert_eq!(g.cell_of(1.9, 0.1), Some((3, 2)));
        assert_eq!(g.cell_of(2.1, 0.0), None);
        assert_eq!(g.to_cell(0.5, -0.5), (2.0, 1.0));
    }
}
