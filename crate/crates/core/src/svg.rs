//! Minimal SVG writer for the static report charts.

use std::fmt::Write;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

#[derive(Clone, Debug)]
pub struct Svg {
    width: f64,
    height: f64,
    body: String,
}

impl Svg {
    pub fn new(width: f64, height: f64) -> Self {
        Self { width, height, body: String::new() }
    }

    pub fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{stroke}" stroke-width="1"/>"#
        );
    }

    pub fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{fill}" fill-opacity="0.5" stroke="{fill}"/>"#,
            w.max(0.0),
            h.max(0.0)
        );
    }

    pub fn circle(&mut self, x: f64, y: f64, r: f64, fill: &str) {
        let _ = writeln!(self.body, r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r:.2}" fill="{fill}"/>"#);
    }

    pub fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str) {
        let p: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="1.5"/>"#,
            p.join(" ")
        );
    }

    pub fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, s: &str) {
        let esc = s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" font-size="{size}" font-family="sans-serif" text-anchor="{anchor}">{esc}</text>"#
        );
    }

    pub fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

/// Plot area inside a canvas with linear axis maps.
#[derive(Clone, Copy, Debug)]
pub struct Frame {
    pub x0: f64,
    pub y0: f64,
    pub w: f64,
    pub h: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl Frame {
    pub fn y(&self, v: f64) -> f64 {
        let span = (self.ymax - self.ymin).max(1e-300);
        self.y0 + self.h - (v - self.ymin) / span * self.h
    }

    /// Center of slot `i` out of `n` equal slots along the x axis.
    pub fn slot(&self, i: usize, n: usize) -> f64 {
        self.x0 + (i as f64 + 0.5) * self.w / n as f64
    }

    pub fn axes(&self, svg: &mut Svg, title: &str, labels: &[String]) {
        svg.line(self.x0, self.y0 + self.h, self.x0 + self.w, self.y0 + self.h, "black");
        svg.line(self.x0, self.y0, self.x0, self.y0 + self.h, "black");
        svg.text(self.x0 + self.w / 2.0, self.y0 - 8.0, 12.0, "middle", title);
        for k in 0..=4 {
            let v = self.ymin + (self.ymax - self.ymin) * k as f64 / 4.0;
            let y = self.y(v);
            svg.line(self.x0 - 4.0, y, self.x0, y, "black");
            svg.text(self.x0 - 6.0, y + 3.0, 9.0, "end", &format!("{v:.3}"));
        }
        for (i, l) in labels.iter().enumerate() {
            svg.text(self.slot(i, labels.len()), self.y0 + self.h + 14.0, 9.0, "middle", l);
        }
    }
}

/// Nearest-rank quantile on sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Range covering all finite values with a small margin.
pub fn value_range<'a>(vals: impl IntoIterator<Item = &'a f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in vals {
        if v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}
