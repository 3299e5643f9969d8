//! Deterministic SVG scatter plots of 2-D point sets.

use std::fmt::Write as _;

use crate::config::PlotConfig;
use crate::ndiff::Array;

pub const PLOT_VERSION: u32 = 1;

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"];
const MARKER_NAMES: [&str; 4] = ["circle", "square", "triangle", "diamond"];
const MARGIN: f64 = 28.0;
const TITLE_H: f64 = 22.0;
const LEGEND_H: f64 = 22.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlotError {
    #[error("scatter plots need 2-D points, got {0} columns")]
    NotPlanar(usize),
    #[error("panel `{title}` has {points} points but {labels} labels and {markers} markers")]
    Length { title: String, points: usize, labels: usize, markers: usize },
}

/// One scatter panel. `markers` picks the marker shape for each point,
/// usually its mode or group index within the class.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub title: String,
    pub points: Array,
    pub labels: Vec<usize>,
    pub markers: Vec<usize>,
}

impl Panel {
    pub fn new(title: impl Into<String>, points: Array, labels: Vec<usize>, markers: Vec<usize>) -> Self {
        Self { title: title.into(), points, labels, markers }
    }

    fn check(&self) -> Result<(), PlotError> {
        if self.points.cols() != 2 && !(self.points.rows() == 0 && self.points.cols() == 0) {
            return Err(PlotError::NotPlanar(self.points.cols()));
        }
        let n = self.points.rows();
        if self.labels.len() != n || self.markers.len() != n {
            return Err(PlotError::Length {
                title: self.title.clone(),
                points: n,
                labels: self.labels.len(),
                markers: self.markers.len(),
            });
        }
        Ok(())
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn marker(out: &mut String, kind: usize, x: f64, y: f64, r: f64, color: &str) {
    let _ = match kind % MARKER_NAMES.len() {
        0 => writeln!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r:.2}" fill="{color}"/>"#),
        1 => writeln!(
            out,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}"/>"#,
            x - r,
            y - r,
            2.0 * r,
            2.0 * r
        ),
        2 => writeln!(
            out,
            r#"<path d="M{x:.2} {:.2}L{:.2} {:.2}L{:.2} {:.2}Z" fill="{color}"/>"#,
            y - 1.2 * r,
            x + 1.1 * r,
            y + 0.8 * r,
            x - 1.1 * r,
            y + 0.8 * r
        ),
        _ => writeln!(
            out,
            r#"<path d="M{x:.2} {:.2}L{:.2} {y:.2}L{x:.2} {:.2}L{:.2} {y:.2}Z" fill="{color}"/>"#,
            y - 1.3 * r,
            x + 1.3 * r,
            y + 1.3 * r,
            x - 1.3 * r
        ),
    };
}

fn axis_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = hi - lo;
    let raw = span / 4.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = vec![];
    while t <= hi + 1e-9 * span {
        out.push(if t.abs() < 1e-12 * span { 0.0 } else { t });
        t += step;
    }
    out
}

fn panel_body(out: &mut String, panel: &Panel, index: usize, ox: f64, oy: f64, cfg: &PlotConfig) {
    let size = cfg.panel_size as f64;
    let [x0, x1, y0, y1] = cfg.viewport;
    let inner = size - 2.0 * MARGIN;
    let (left, top) = (ox + MARGIN, oy + TITLE_H);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * inner;
    let sy = |y: f64| top + (y1 - y) / (y1 - y0) * inner;
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="13">{}</text>"#,
        ox + size / 2.0,
        oy + 15.0,
        escape(&panel.title)
    );
    let _ = writeln!(out, r#"<clipPath id="clip{index}"><rect x="{left:.2}" y="{top:.2}" width="{inner:.2}" height="{inner:.2}"/></clipPath>"#);
    let _ = writeln!(
        out,
        r##"<rect x="{left:.2}" y="{top:.2}" width="{inner:.2}" height="{inner:.2}" fill="none" stroke="#444"/>"##
    );
    for t in axis_ticks(x0, x1) {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="9">{t}</text>"#,
            sx(t),
            top + inner + 11.0
        );
    }
    for t in axis_ticks(y0, y1) {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="9">{t}</text>"#,
            left - 3.0,
            sy(t) + 3.0
        );
    }
    let _ = writeln!(out, r#"<g clip-path="url(#clip{index})" fill-opacity="0.6">"#);
    for i in 0..panel.points.rows() {
        let row = panel.points.row(i);
        let color = PALETTE[panel.labels[i] % PALETTE.len()];
        marker(out, panel.markers[i], sx(row[0]), sy(row[1]), 2.0, color);
    }
    out.push_str("</g>\n");
}

/// Panels laid out left to right in rows of `columns`, with one shared legend
/// listing every class color and marker shape that appears.
pub fn grid_svg(panels: &[Panel], columns: usize, cfg: &PlotConfig) -> Result<String, PlotError> {
    for p in panels {
        p.check()?;
    }
    let columns = columns.max(1).min(panels.len().max(1));
    let rows = panels.len().div_ceil(columns).max(1);
    let size = cfg.panel_size as f64;
    let (pw, ph) = (size, size - 2.0 * MARGIN + TITLE_H + 18.0);
    let width = pw * columns as f64;
    let height = ph * rows as f64 + LEGEND_H;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" data-fbgs-plot="{PLOT_VERSION}" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif">"#
    );
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for (i, p) in panels.iter().enumerate() {
        panel_body(&mut out, p, i, pw * (i % columns) as f64, ph * (i / columns) as f64, cfg);
    }
    let mut classes: Vec<usize> = panels.iter().flat_map(|p| p.labels.iter().copied()).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut markers: Vec<usize> = panels.iter().flat_map(|p| p.markers.iter().map(|m| m % MARKER_NAMES.len())).collect();
    markers.sort_unstable();
    markers.dedup();
    let ly = height - LEGEND_H / 2.0;
    let mut lx = MARGIN;
    for c in classes {
        marker(&mut out, 0, lx, ly, 4.0, PALETTE[c % PALETTE.len()]);
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" font-size="11">class {c}</text>"#, lx + 7.0, ly + 4.0);
        lx += 64.0;
    }
    for m in markers {
        marker(&mut out, m, lx, ly, 4.0, "#555");
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" font-size="11">mode {m}</text>"#, lx + 7.0, ly + 4.0);
        lx += 64.0;
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn scatter_svg(panel: &Panel, cfg: &PlotConfig) -> Result<String, PlotError> {
    grid_svg(std::slice::from_ref(panel), 1, cfg)
}

/// Real data beside unguided and guided samples.
pub fn three_panel_svg(real: &Panel, unguided: &Panel, guided: &Panel, cfg: &PlotConfig) -> Result<String, PlotError> {
    grid_svg(&[real.clone(), unguided.clone(), guided.clone()], 3, cfg)
}
