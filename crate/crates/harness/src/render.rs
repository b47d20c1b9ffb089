//! Static SVG rendering of one ego-frame BEV.
//!
//! Meters to pixels: with ego-frame `x` forward and `y` left, the image
//! shows forward as up and left as left:
//!
//! ```text
//! u = (E_y / 2 − y) · s + m
//! v = (E_x / 2 − x) · s + m
//! ```
//!
//! where `E_x × E_y` is the grid extent in meters, `s` pixels per meter and
//! `m` the margin in pixels.

use std::fmt::Write;

use coperc_core::bbox::BoxBEV;
use coperc_core::detection::Detection;
use coperc_core::geometry::{BevGrid, Pose2};
use coperc_core::Modality;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelMap {
    pub extent_x: f64,
    pub extent_y: f64,
    pub scale: f64,
    pub margin: f64,
}

impl PixelMap {
    pub fn for_grid(grid: &BevGrid, scale: f64) -> Self {
        let (ex, ey) = grid.extent();
        Self { extent_x: ex, extent_y: ey, scale, margin: 10.0 }
    }

    pub fn to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        ((self.extent_y / 2.0 - y) * self.scale + self.margin, (self.extent_x / 2.0 - x) * self.scale + self.margin)
    }

    pub fn size(&self) -> (f64, f64) {
        (self.extent_y * self.scale + 2.0 * self.margin, self.extent_x * self.scale + 2.0 * self.margin)
    }
}

/// An agent in the ego frame with its FoV radius.
#[derive(Clone, Copy, Debug)]
pub struct AgentMark {
    pub pose: Pose2,
    pub modality: Modality,
    pub fov_radius: f64,
}

pub const PRED_COLOR: &str = "#d62728";
pub const GT_COLOR: &str = "#2ca02c";

fn polygon(out: &mut String, map: &PixelMap, b: &BoxBEV, color: &str) {
    let pts: Vec<String> = b
        .corners()
        .iter()
        .map(|&(x, y)| {
            let (u, v) = map.to_pixel(x, y);
            format!("{u:.2},{v:.2}")
        })
        .collect();
    writeln!(out, r#"<polygon points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, pts.join(" ")).unwrap();
}

/// Render agents (with FoV discs), ground truth in green and predictions in
/// red; everything is in the ego frame.
pub fn render_svg(map: &PixelMap, agents: &[AgentMark], dets: &[Detection], gts: &[BoxBEV]) -> String {
    let (wpx, hpx) = map.size();
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{wpx:.0}" height="{hpx:.0}" viewBox="0 0 {wpx:.2} {hpx:.2}">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    let (x0, y0) = map.to_pixel(map.extent_x / 2.0, map.extent_y / 2.0);
    writeln!(
        s,
        r##"<rect x="{x0:.2}" y="{y0:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#888888"/>"##,
        map.extent_y * map.scale,
        map.extent_x * map.scale
    )
    .unwrap();
    writeln!(s, r#"<clipPath id="bev"><rect x="{x0:.2}" y="{y0:.2}" width="{:.2}" height="{:.2}"/></clipPath>"#, map.extent_y * map.scale, map.extent_x * map.scale).unwrap();
    writeln!(s, r#"<g clip-path="url(#bev)">"#).unwrap();
    for a in agents {
        let (u, v) = map.to_pixel(a.pose.x, a.pose.y);
        let color = match a.modality {
            Modality::Camera => "#1f77b4",
            Modality::Lidar => "#ff7f0e",
        };
        writeln!(s, r#"<circle cx="{u:.2}" cy="{v:.2}" r="{:.2}" fill="{color}" fill-opacity="0.08" stroke="{color}" stroke-opacity="0.4"/>"#, a.fov_radius * map.scale).unwrap();
        writeln!(s, r#"<circle cx="{u:.2}" cy="{v:.2}" r="4" fill="{color}"/>"#).unwrap();
        let (hx, hy) = (a.pose.x + 3.0 * a.pose.yaw.cos(), a.pose.y + 3.0 * a.pose.yaw.sin());
        let (hu, hv) = map.to_pixel(hx, hy);
        writeln!(s, r#"<line x1="{u:.2}" y1="{v:.2}" x2="{hu:.2}" y2="{hv:.2}" stroke="{color}" stroke-width="2"/>"#).unwrap();
    }
    for g in gts {
        polygon(&mut s, map, g, GT_COLOR);
    }
    for d in dets {
        polygon(&mut s, map, &d.bbox, PRED_COLOR);
    }
    writeln!(s, "</g>\n</svg>").unwrap();
    s
}
