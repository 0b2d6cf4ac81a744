//! Deterministic SVG drawings of plans.
//!
//! World coordinates are mapped onto a fixed canvas through a fixed window,
//! so identical plans give byte-identical documents. Stroke width is
//! `w_min + w_scale * f^alpha` for the flux `f` carried by a segment.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{RamifyError, Result};
use crate::geometry::Point;
use crate::plan::{BranchPlan, PathPlan, Segmented};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvgStyle {
    /// Canvas size in pixels.
    pub width: u32,
    pub height: u32,
    /// World window `[xmin, xmax, ymin, ymax]` mapped onto the canvas.
    pub window: [f64; 4],
    pub w_min: f64,
    pub w_scale: f64,
    /// Exponent in the width formula.
    pub alpha: f64,
    pub stroke: String,
    /// Radius in pixels of target and root markers.
    pub marker_radius: f64,
}

impl Default for SvgStyle {
    fn default() -> Self {
        SvgStyle {
            width: 640,
            height: 400,
            window: [-1.2, 1.2, -0.15, 1.35],
            w_min: 0.5,
            w_scale: 8.0,
            alpha: 0.5,
            stroke: "#2b4c7e".into(),
            marker_radius: 3.0,
        }
    }
}

impl SvgStyle {
    pub fn validate(&self) -> Result<()> {
        let [x0, x1, y0, y1] = self.window;
        if self.width == 0 || self.height == 0 || !(x1 > x0) || !(y1 > y0) {
            return Err(RamifyError::Config("svg: canvas must be nonempty and the window increasing".into()));
        }
        if !(self.w_min >= 0.0 && self.w_scale >= 0.0 && self.marker_radius >= 0.0) {
            return Err(RamifyError::Config("svg: widths and marker radius must be nonnegative".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha <= 1.0) {
            return Err(RamifyError::Config("svg: alpha must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn with_alpha(&self, alpha: f64) -> Self {
        SvgStyle { alpha, ..self.clone() }
    }

    fn map(&self, p: Point) -> (f64, f64) {
        let [x0, x1, y0, y1] = self.window;
        let sx = (p.x - x0) / (x1 - x0) * self.width as f64;
        // SVG's y axis points down.
        let sy = (y1 - p.y) / (y1 - y0) * self.height as f64;
        (sx, sy)
    }

    fn stroke_width(&self, flux: f64) -> f64 {
        self.w_min + self.w_scale * flux.max(0.0).powf(self.alpha)
    }
}

/// Something that can be drawn.
pub trait Render {
    fn render_body(&self, style: &SvgStyle, out: &mut String);
}

fn header(style: &SvgStyle, out: &mut String) {
    let (w, h) = (style.width, style.height);
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let (ax0, ay) = style.map(Point::new(style.window[0], 0.0));
    let (ax1, _) = style.map(Point::new(style.window[1], 0.0));
    let _ = writeln!(
        out,
        r##"<line class="axis" x1="{ax0:.3}" y1="{ay:.3}" x2="{ax1:.3}" y2="{ay:.3}" stroke="#bbbbbb" stroke-width="0.5"/>"##
    );
}

fn footer(style: &SvgStyle, out: &mut String) {
    let (rx, ry) = style.map(Point::ORIGIN);
    let _ = writeln!(
        out,
        r#"<circle class="root" cx="{rx:.3}" cy="{ry:.3}" r="{:.3}" fill="black"/>"#,
        style.marker_radius
    );
    out.push_str("</svg>\n");
}

/// Full SVG document for `plan`.
pub fn render_svg<R: Render + ?Sized>(plan: &R, style: &SvgStyle) -> String {
    let mut out = String::new();
    header(style, &mut out);
    plan.render_body(style, &mut out);
    footer(style, &mut out);
    out
}

/// One polyline per path, width from the path's mass; pinned targets drawn
/// as dots.
impl Render for PathPlan {
    fn render_body(&self, style: &SvgStyle, out: &mut String) {
        for p in &self.paths {
            let pts: Vec<String> = p
                .vertices
                .iter()
                .map(|&v| {
                    let (x, y) = style.map(v);
                    format!("{x:.3},{y:.3}")
                })
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline class="path" points="{}" fill="none" stroke="{}" stroke-width="{:.4}" stroke-linecap="round" stroke-linejoin="round" stroke-opacity="0.6"/>"#,
                pts.join(" "),
                style.stroke,
                style.stroke_width(p.mass)
            );
        }
        for p in &self.paths {
            let (x, y) = style.map(p.target);
            let _ = writeln!(
                out,
                r##"<circle class="target" cx="{x:.3}" cy="{y:.3}" r="{:.3}" fill="#c0392b"/>"##,
                style.marker_radius
            );
        }
    }
}

/// One line per interval, width from its downstream flux.
impl Render for BranchPlan {
    fn render_body(&self, style: &SvgStyle, out: &mut String) {
        for s in &self.segment_table().segments {
            let (x1, y1) = style.map(s.start);
            let (x2, y2) = style.map(s.end);
            let _ = writeln!(
                out,
                r#"<line class="segment" x1="{x1:.3}" y1="{y1:.3}" x2="{x2:.3}" y2="{y2:.3}" stroke="{}" stroke-width="{:.4}" stroke-linecap="round"/>"#,
                style.stroke,
                style.stroke_width(s.flux)
            );
        }
    }
}
