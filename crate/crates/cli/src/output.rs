//! Deterministic CSV and SVG writers.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CliError, CliResult};

/// 17 significant digits, enough to round-trip any `f64`.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

pub fn flag(b: bool) -> String {
    u8::from(b).to_string()
}

/// Writes an RFC 4180 file (CRLF records, minimal quoting).
pub fn write_csv<I>(path: &Path, header: &[&str], rows: I) -> CliResult<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_path(path)
        .map_err(|e| CliError::io(path, e))?;
    w.write_record(header).map_err(|e| CliError::io(path, e))?;
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        w.write_record(&row).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// `field,index,value` rows for a flat report.
#[derive(Debug, Default, Clone)]
pub struct Report {
    rows: Vec<Vec<String>>,
}

impl Report {
    pub fn value(&mut self, field: &str, v: f64) -> &mut Self {
        self.rows.push(vec![field.into(), "0".into(), num(v)]);
        self
    }

    pub fn count(&mut self, field: &str, v: usize) -> &mut Self {
        self.rows.push(vec![field.into(), "0".into(), v.to_string()]);
        self
    }

    pub fn values(&mut self, field: &str, vs: &[f64]) -> &mut Self {
        for (k, v) in vs.iter().enumerate() {
            self.rows.push(vec![field.into(), k.to_string(), num(*v)]);
        }
        self
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        write_csv(path, &["field", "index", "value"], self.rows.iter().cloned())
    }
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// An SVG 1.1 document assembled from fixed-precision primitives.
#[derive(Debug, Clone)]
pub struct Svg {
    width: f64,
    height: f64,
    body: String,
}

impl Svg {
    pub fn new(width: f64, height: f64) -> Self {
        Self { width, height, body: String::new() }
    }

    pub fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, content: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" font-family="sans-serif" font-size="{size:.1}" text-anchor="{anchor}">{}</text>"#,
            escape(content)
        );
    }

    pub fn line(&mut self, (x1, y1): (f64, f64), (x2, y2): (f64, f64), stroke: &str, width: f64) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{stroke}" stroke-width="{width:.2}"/>"#
        );
    }

    pub fn finish(self) -> String {
        format!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">\n<rect x=\"0\" y=\"0\" width=\"{w:.0}\" height=\"{h:.0}\" fill=\"white\"/>\n{body}</svg>\n",
            w = self.width,
            h = self.height,
            body = self.body
        )
    }
}

/// A plotting area mapping data coordinates into a rectangle of the page.
#[derive(Debug, Clone, Copy)]
pub struct Frame {
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl Frame {
    pub fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let u = (x - self.x.0) / (self.x.1 - self.x.0);
        let v = (y - self.y.0) / (self.y.1 - self.y.0);
        (self.left + u * self.width, self.top + (1.0 - v) * self.height)
    }

    pub fn axes(&self, svg: &mut Svg, title: &str, xlabel: &str, ylabel: &str) {
        let (l, t, w, h) = (self.left, self.top, self.width, self.height);
        svg.line((l, t + h), (l + w, t + h), "black", 1.0);
        svg.line((l, t), (l, t + h), "black", 1.0);
        for k in 0..=4 {
            let f = k as f64 / 4.0;
            let xv = self.x.0 + f * (self.x.1 - self.x.0);
            let yv = self.y.0 + f * (self.y.1 - self.y.0);
            let (px, _) = self.map(xv, self.y.0);
            let (_, py) = self.map(self.x.0, yv);
            svg.line((px, t + h), (px, t + h + 4.0), "black", 1.0);
            svg.text(px, t + h + 16.0, 10.0, "middle", &format!("{xv:.2}"));
            svg.line((l - 4.0, py), (l, py), "black", 1.0);
            svg.text(l - 6.0, py + 3.5, 10.0, "end", &format!("{yv:.2}"));
        }
        svg.text(l + w / 2.0, t - 10.0, 13.0, "middle", title);
        svg.text(l + w / 2.0, t + h + 32.0, 11.0, "middle", xlabel);
        let _ = writeln!(
            svg.body,
            r#"<text x="{x:.2}" y="{y:.2}" font-family="sans-serif" font-size="11.0" text-anchor="middle" transform="rotate(-90 {x:.2} {y:.2})">{}</text>"#,
            escape(ylabel),
            x = l - 42.0,
            y = t + h / 2.0
        );
    }

    /// Draws the points inside the frame's x range; non-finite points break
    /// the line.
    pub fn polyline(&self, svg: &mut Svg, xs: &[f64], ys: &[f64], stroke: &str, dashed: bool) {
        let mut runs: Vec<Vec<(f64, f64)>> = vec![Vec::new()];
        for (x, y) in xs.iter().zip(ys) {
            if x.is_finite() && y.is_finite() {
                runs.last_mut().expect("non-empty").push(self.map(*x, y.clamp(self.y.0, self.y.1)));
            } else if !runs.last().expect("non-empty").is_empty() {
                runs.push(Vec::new());
            }
        }
        let dash = if dashed { r#" stroke-dasharray="5,3""# } else { "" };
        for run in runs.iter().filter(|r| r.len() > 1) {
            let pts: Vec<String> = run.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
            let _ = writeln!(
                svg.body,
                r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="1.2"{dash}/>"#,
                pts.join(" ")
            );
        }
    }

    pub fn marker(&self, svg: &mut Svg, x: f64, y: f64, fill: &str) {
        let (px, py) = self.map(x, y);
        let _ = writeln!(svg.body, r#"<circle cx="{px:.2}" cy="{py:.2}" r="2.5" fill="{fill}" stroke="black" stroke-width="0.5"/>"#);
    }

    /// Legend entries stacked at the top right of the frame.
    pub fn legend(&self, svg: &mut Svg, entries: &[(&str, &str, bool)]) {
        for (k, (label, stroke, dashed)) in entries.iter().enumerate() {
            let y = self.top + 12.0 + 15.0 * k as f64;
            let x = self.left + self.width - 150.0;
            let dash = if *dashed { r#" stroke-dasharray="5,3""# } else { "" };
            let _ = writeln!(
                svg.body,
                r#"<line x1="{x:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{stroke}" stroke-width="1.5"{dash}/>"#,
                x + 24.0
            );
            svg.text(x + 30.0, y + 3.5, 10.0, "start", label);
        }
    }
}
