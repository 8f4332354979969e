//! Standalone SVG renderings of traces and predictions.
//!
//! Every plot carries its data-to-pixel mapping on the `plot-area` group so
//! the drawn coordinates can be read back.

use std::fmt::Write;

use super::export::GridTable;
use crate::error::{Error, Result};
use crate::inference::TraceEntry;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

/// Linear map from data coordinates to the plotting area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(hi > lo) {
        let c = if lo.is_finite() { lo } else { 0.0 };
        return (c - 0.5, c + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

impl Frame {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let (x_min, x_max) = if x.1 > x.0 { x } else { padded(x.0, x.1) };
        let (y_min, y_max) = padded(y.0, y.1);
        Frame { x_min, x_max, y_min, y_max, left: LEFT, top: TOP, width: WIDTH - LEFT - RIGHT, height: HEIGHT - TOP - BOTTOM }
    }

    pub fn px(&self, x: f64) -> f64 {
        self.left + (x - self.x_min) / (self.x_max - self.x_min) * self.width
    }

    pub fn py(&self, y: f64) -> f64 {
        self.top + (self.y_max - y) / (self.y_max - self.y_min) * self.height
    }

    pub fn data_x(&self, px: f64) -> f64 {
        self.x_min + (px - self.left) / self.width * (self.x_max - self.x_min)
    }

    pub fn data_y(&self, py: f64) -> f64 {
        self.y_max - (py - self.top) / self.height * (self.y_max - self.y_min)
    }

    fn open(&self, out: &mut String) {
        let _ = writeln!(
            out,
            r#"<g id="plot-area" data-x-min="{}" data-x-max="{}" data-y-min="{}" data-y-max="{}" data-left="{}" data-top="{}" data-width="{}" data-height="{}">"#,
            self.x_min, self.x_max, self.y_min, self.y_max, self.left, self.top, self.width, self.height
        );
    }

    /// Reads the mapping back from an emitted SVG.
    pub fn parse(svg: &str) -> Result<Self> {
        let tag = element(svg, r#"<g id="plot-area""#).ok_or_else(|| Error::Parse("svg has no plot-area".into()))?;
        let get = |name: &str| -> Result<f64> {
            attr(tag, name)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Parse(format!("plot-area lacks {name}")))
        };
        Ok(Frame {
            x_min: get("data-x-min")?,
            x_max: get("data-x-max")?,
            y_min: get("data-y-min")?,
            y_max: get("data-y-max")?,
            left: get("data-left")?,
            top: get("data-top")?,
            width: get("data-width")?,
            height: get("data-height")?,
        })
    }
}

fn element<'a>(svg: &'a str, start: &str) -> Option<&'a str> {
    let i = svg.find(start)?;
    let end = svg[i..].find('>')?;
    Some(&svg[i..i + end])
}

fn attr<'a>(tag: &'a str, name: &str) -> Option<&'a str> {
    let key = format!(" {name}=\"");
    let i = tag.find(&key)? + key.len();
    let end = tag[i..].find('"')?;
    Some(&tag[i..i + end])
}

fn parse_points(s: &str) -> Result<Vec<(f64, f64)>> {
    s.split_whitespace()
        .map(|pair| {
            let (a, b) = pair.split_once(',').ok_or_else(|| Error::Parse(format!("bad point {pair:?}")))?;
            let a = a.parse().map_err(|_| Error::Parse(format!("bad point {pair:?}")))?;
            let b = b.parse().map_err(|_| Error::Parse(format!("bad point {pair:?}")))?;
            Ok((a, b))
        })
        .collect()
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, WIDTH / 2.0, escape(title));
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn axes(out: &mut String, f: &Frame, x_label: &str, y_label: &str) {
    let (x0, y0, x1, y1) = (f.left, f.top + f.height, f.left + f.width, f.top);
    let _ = writeln!(out, r#"<g class="axes" stroke="black" fill="none"><line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}"/><line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/></g>"#);
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let xv = f.x_min + t * (f.x_max - f.x_min);
        let yv = f.y_min + t * (f.y_max - f.y_min);
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, f.px(xv), y0 + 16.0, tick(xv));
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, x0 - 6.0, f.py(yv) + 4.0, tick(yv));
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, f.left + f.width / 2.0, HEIGHT - 10.0, escape(x_label));
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        f.top + f.height / 2.0,
        f.top + f.height / 2.0,
        escape(y_label)
    );
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn polyline(f: &Frame, xs: &[f64], ys: &[f64]) -> String {
    xs.iter().zip(ys).map(|(&x, &y)| format!("{},{}", f.px(x), f.py(y))).collect::<Vec<_>>().join(" ")
}

/// ELBO against iteration.
pub fn trace_svg(entries: &[TraceEntry], title: &str) -> Result<String> {
    if entries.is_empty() {
        return Err(Error::InvalidConfig("trace has no entries".into()));
    }
    let xs: Vec<f64> = entries.iter().map(|e| e.iteration as f64).collect();
    let ys: Vec<f64> = entries.iter().map(|e| e.elbo).collect();
    let f = Frame::new(range(xs.iter().copied()), range(ys.iter().copied()));
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &f, "iteration", "ELBO");
    f.open(&mut out);
    let _ = writeln!(out, r##"<polyline class="elbo" fill="none" stroke="#1f77b4" stroke-width="1" points="{}"/>"##, polyline(&f, &xs, &ys));
    out.push_str("</g>\n</svg>\n");
    Ok(out)
}

/// Mean line with a band of two standard deviations over a 1-D grid.
pub fn band_svg(table: &GridTable, title: &str) -> Result<String> {
    if table.dimension() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, actual: table.dimension() });
    }
    let mut idx: Vec<usize> = (0..table.points.len()).collect();
    idx.sort_by(|&a, &b| table.points[a][0].total_cmp(&table.points[b][0]));
    let xs: Vec<f64> = idx.iter().map(|&i| table.points[i][0]).collect();
    let mean: Vec<f64> = idx.iter().map(|&i| table.mean[i]).collect();
    let half: Vec<f64> = idx.iter().map(|&i| 2.0 * table.variance[i].max(0.0).sqrt()).collect();
    let upper: Vec<f64> = mean.iter().zip(&half).map(|(m, h)| m + h).collect();
    let lower: Vec<f64> = mean.iter().zip(&half).map(|(m, h)| m - h).collect();
    let f = Frame::new(range(xs.iter().copied()), range(upper.iter().chain(&lower).copied()));
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &f, "x", "value");
    f.open(&mut out);
    let mut band = polyline(&f, &xs, &upper);
    let rev_x: Vec<f64> = xs.iter().rev().copied().collect();
    let rev_lo: Vec<f64> = lower.iter().rev().copied().collect();
    band.push(' ');
    band.push_str(&polyline(&f, &rev_x, &rev_lo));
    let _ = writeln!(out, r##"<polygon class="band" fill="#1f77b4" fill-opacity="0.25" stroke="none" points="{band}"/>"##);
    let _ = writeln!(out, r##"<polyline class="mean" fill="none" stroke="#1f77b4" stroke-width="1.5" points="{}"/>"##, polyline(&f, &xs, &mean));
    out.push_str("</g>\n</svg>\n");
    Ok(out)
}

/// One band sample read back from an SVG: `(x, lower, upper)` in data units.
pub fn read_band(svg: &str) -> Result<Vec<(f64, f64, f64)>> {
    let f = Frame::parse(svg)?;
    let tag = element(svg, r#"<polygon class="band""#).ok_or_else(|| Error::Parse("svg has no band".into()))?;
    let pts = parse_points(attr(tag, "points").ok_or_else(|| Error::Parse("band has no points".into()))?)?;
    if pts.len() % 2 != 0 {
        return Err(Error::Parse("band must have an even number of vertices".into()));
    }
    let n = pts.len() / 2;
    Ok((0..n)
        .map(|i| {
            let (px, up) = pts[i];
            let (_, lo) = pts[2 * n - 1 - i];
            (f.data_x(px), f.data_y(lo), f.data_y(up))
        })
        .collect())
}

fn colour(t: f64) -> String {
    // Dark blue through teal to yellow.
    let stops = [(0.0, [68.0, 1.0, 84.0]), (0.5, [33.0, 145.0, 140.0]), (1.0, [253.0, 231.0, 37.0])];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let (a, b) = if t <= 0.5 { (stops[0], stops[1]) } else { (stops[1], stops[2]) };
    let u = (t - a.0) / (b.0 - a.0);
    let c: Vec<u8> = (0..3).map(|k| (a.1[k] + u * (b.1[k] - a.1[k])).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn axis_values(table: &GridTable, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = table.points.iter().map(|p| p[d]).collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

fn spacing(v: &[f64]) -> f64 {
    if v.len() > 1 {
        (v[v.len() - 1] - v[0]) / (v.len() - 1) as f64
    } else {
        1.0
    }
}

/// Predictive mean over a 2-D grid, one rectangle per grid point.
pub fn heatmap_svg(table: &GridTable, title: &str) -> Result<String> {
    if table.dimension() != 2 {
        return Err(Error::DimensionMismatch { expected: 2, actual: table.dimension() });
    }
    let xs = axis_values(table, 0);
    let ys = axis_values(table, 1);
    let (hx, hy) = (spacing(&xs), spacing(&ys));
    let x_range = (xs[0] - 0.5 * hx, xs[xs.len() - 1] + 0.5 * hx);
    let y_range = (ys[0] - 0.5 * hy, ys[ys.len() - 1] + 0.5 * hy);
    let mut f = Frame::new(x_range, y_range);
    // No padding on a heatmap: the cells fill the area.
    (f.y_min, f.y_max) = y_range;
    let (lo, hi) = range(table.mean.iter().copied());
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &f, "x0", "x1");
    f.open(&mut out);
    let w = f.width * hx / (f.x_max - f.x_min);
    let h = f.height * hy / (f.y_max - f.y_min);
    for (p, m) in table.points.iter().zip(&table.mean) {
        let t = if hi > lo { (m - lo) / (hi - lo) } else { 0.5 };
        let _ = writeln!(
            out,
            r#"<rect class="cell" x="{}" y="{}" width="{w}" height="{h}" fill="{}" data-value="{m}"/>"#,
            f.px(p[0] - 0.5 * hx),
            f.py(p[1] + 0.5 * hy),
            colour(t)
        );
    }
    out.push_str("</g>\n");
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">mean in [{}, {}]</text>"#, WIDTH - RIGHT, TOP - 6.0, tick(lo), tick(hi));
    out.push_str("</svg>\n");
    Ok(out)
}
