//! Minimal self-contained SVG charts: scatter, line and bar series on
//! linear axes, with a legend and vertical markers.

use std::fmt::Write as _;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;
const TICKS: usize = 5;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    Scatter,
    Line,
    Bar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub style: Style,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(label: impl Into<String>, style: Style, points: Vec<(f64, f64)>) -> Self {
        Self {
            label: label.into(),
            style,
            points,
        }
    }

    /// Points at `x = 0, 1, 2, ...`.
    pub fn indexed(
        label: impl Into<String>,
        style: Style,
        ys: impl IntoIterator<Item = f64>,
    ) -> Self {
        let points = ys
            .into_iter()
            .enumerate()
            .map(|(i, y)| (i as f64, y))
            .collect();
        Self::new(label, style, points)
    }
}

/// A dashed vertical line at `x`, listed in the legend under `label`.
#[derive(Debug, Clone, PartialEq)]
pub struct Marker {
    pub x: f64,
    pub label: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    pub markers: Vec<Marker>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-3 {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - TOP - BOTTOM)
    }
}

fn bounds(values: impl Iterator<Item = f64>, include_zero: bool) -> (f64, f64) {
    let (mut lo, mut hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if include_zero {
        lo = lo.min(0.0);
        hi = hi.max(0.0);
    }
    if hi - lo < 1e-12 {
        let pad = if hi.abs() > 0.0 { hi.abs() * 0.1 } else { 1.0 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

impl Chart {
    pub fn new(
        title: impl Into<String>,
        x_label: impl Into<String>,
        y_label: impl Into<String>,
    ) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            ..Default::default()
        }
    }

    pub fn with_series(mut self, series: Series) -> Self {
        self.series.push(series);
        self
    }

    pub fn with_marker(mut self, x: f64, label: impl Into<String>) -> Self {
        self.markers.push(Marker {
            x,
            label: label.into(),
        });
        self
    }

    fn frame(&self) -> Frame {
        let xs = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.0))
            .chain(self.markers.iter().map(|m| m.x));
        let (mut x0, mut x1) = bounds(xs, false);
        if self.series.iter().any(|s| s.style == Style::Bar) {
            x0 -= 0.5;
            x1 += 0.5;
        }
        let ys = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.1));
        let (y0, y1) = bounds(ys, true);
        Frame { x0, x1, y0, y1 }
    }

    pub fn render(&self) -> String {
        let f = self.frame();
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            (LEFT + WIDTH - RIGHT) / 2.0,
            escape(&self.title)
        );
        self.render_axes(&f, &mut out);
        for (idx, s) in self.series.iter().enumerate() {
            render_series(
                &f,
                s,
                PALETTE[idx % PALETTE.len()],
                self.bar_width(&f),
                &mut out,
            );
        }
        for m in &self.markers {
            let x = f.px(m.x);
            let _ = writeln!(
                out,
                r#"<line class="marker" x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="black" stroke-dasharray="4 3"/>"#,
                HEIGHT - BOTTOM
            );
        }
        self.render_legend(&mut out);
        out.push_str("</svg>\n");
        out
    }

    fn bar_width(&self, f: &Frame) -> f64 {
        let n = self
            .series
            .iter()
            .filter(|s| s.style == Style::Bar)
            .map(|s| s.points.len())
            .max()
            .unwrap_or(1)
            .max(1);
        ((f.px(f.x1) - f.px(f.x0)) / (n as f64 + 1.0) * 0.8).max(1.0)
    }

    fn render_axes(&self, f: &Frame, out: &mut String) {
        let (left, right, top, bottom) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);
        let _ = writeln!(
            out,
            r##"<rect x="{left}" y="{top}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
            right - left,
            bottom - top
        );
        for t in 0..=TICKS {
            let frac = t as f64 / TICKS as f64;
            let xv = f.x0 + frac * (f.x1 - f.x0);
            let yv = f.y0 + frac * (f.y1 - f.y0);
            let (x, y) = (f.px(xv), f.py(yv));
            let _ = writeln!(
                out,
                r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#,
                bottom + 16.0,
                tick_label(xv)
            );
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
                left - 6.0,
                y + 4.0,
                tick_label(yv)
            );
            let _ = writeln!(
                out,
                r##"<line x1="{left}" y1="{y:.2}" x2="{right}" y2="{y:.2}" stroke="#ddd"/>"##
            );
        }
        if f.y0 < 0.0 && f.y1 > 0.0 {
            let y = f.py(0.0);
            let _ = writeln!(
                out,
                r##"<line x1="{left}" y1="{y:.2}" x2="{right}" y2="{y:.2}" stroke="#888"/>"##
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            (left + right) / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
            (top + bottom) / 2.0,
            escape(&self.y_label)
        );
    }

    fn render_legend(&self, out: &mut String) {
        let x = WIDTH - RIGHT + 14.0;
        let mut y = TOP + 10.0;
        let _ = writeln!(out, r#"<g class="legend">"#);
        for (idx, s) in self.series.iter().enumerate() {
            let color = PALETTE[idx % PALETTE.len()];
            let _ = writeln!(
                out,
                r#"<rect x="{x}" y="{}" width="12" height="8" fill="{color}"/><text x="{}" y="{y}">{}</text>"#,
                y - 8.0,
                x + 18.0,
                escape(&s.label)
            );
            y += 18.0;
        }
        for m in &self.markers {
            let _ = writeln!(
                out,
                r#"<line x1="{x}" y1="{0}" x2="{1}" y2="{0}" stroke="black" stroke-dasharray="4 3"/><text x="{2}" y="{y}">{3}</text>"#,
                y - 4.0,
                x + 12.0,
                x + 18.0,
                escape(&m.label)
            );
            y += 18.0;
        }
        let _ = writeln!(out, "</g>");
    }
}

fn render_series(f: &Frame, s: &Series, color: &str, bar_width: f64, out: &mut String) {
    let pts = s
        .points
        .iter()
        .filter(|p| p.0.is_finite() && p.1.is_finite());
    match s.style {
        Style::Scatter => {
            for &(x, y) in pts {
                let _ = writeln!(
                    out,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}" fill-opacity="0.8"/>"#,
                    f.px(x),
                    f.py(y)
                );
            }
        }
        Style::Line => {
            let path: Vec<String> = pts
                .map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                path.join(" ")
            );
        }
        Style::Bar => {
            let base = f.py(0.0f64.clamp(f.y0, f.y1));
            for &(x, y) in pts {
                let top = f.py(y);
                let _ = writeln!(
                    out,
                    r#"<rect x="{:.2}" y="{:.2}" width="{bar_width:.2}" height="{:.2}" fill="{color}"/>"#,
                    f.px(x) - bar_width / 2.0,
                    top.min(base),
                    (top - base).abs()
                );
            }
        }
    }
}
