//! Deterministic SVG line charts from result CSVs.
//!
//! Rows are grouped by a series column; rows sharing a series and x value
//! (typically different seeds) are averaged, and a band of one standard
//! deviation is drawn around the mean line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_column: String,
    pub y_column: String,
    pub series_column: String,
}

impl ChartSpec {
    /// Surplus against the sweep value, one line per method.
    pub fn sweep(title: &str, x_label: &str) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: "Total surplus".into(),
            x_column: "sweep_value".into(),
            y_column: "total_surplus".into(),
            series_column: "method".into(),
        }
    }

    /// Smoothed training surplus against the step, one line per agent.
    pub fn convergence(title: &str) -> Self {
        Self {
            title: title.into(),
            x_label: "Training step".into(),
            y_label: "Smoothed surplus".into(),
            x_column: "step".into(),
            y_column: "smoothed_surplus".into(),
            series_column: "agent".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    /// `(x, mean, std)` sorted by x.
    pub points: Vec<(f64, f64, f64)>,
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const MARGIN_LEFT: f64 = 80.0;
const MARGIN_RIGHT: f64 = 170.0;
const MARGIN_TOP: f64 = 50.0;
const MARGIN_BOTTOM: f64 = 60.0;

/// Reads and aggregates the series of a CSV. Lines starting with `#` are
/// comments.
pub fn load_series(csv_text: &str, spec: &ChartSpec) -> Result<Vec<Series>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(csv_text.as_bytes());
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("CSV has no column '{name}'")))
    };
    let (xi, yi, si) = (column(&spec.x_column)?, column(&spec.y_column)?, column(&spec.series_column)?);

    // (series, x) -> y values, in order of first appearance.
    let mut groups: Vec<(String, Vec<(f64, Vec<f64>)>)> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let parse = |i: usize| -> Result<f64> {
            record[i]
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad number '{}': {e}", &record[i])))
        };
        let (x, y, name) = (parse(xi)?, parse(yi)?, record[si].to_string());
        let series = match groups.iter_mut().position(|(n, _)| *n == name) {
            Some(i) => &mut groups[i].1,
            None => {
                groups.push((name, Vec::new()));
                &mut groups.last_mut().expect("just pushed").1
            }
        };
        match series.iter_mut().find(|(px, _)| *px == x) {
            Some((_, ys)) => ys.push(y),
            None => series.push((x, vec![y])),
        }
    }
    if groups.is_empty() {
        return Err(Error::Config("CSV holds no data rows".into()));
    }
    Ok(groups
        .into_iter()
        .map(|(name, mut pts)| {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let points = pts
                .into_iter()
                .map(|(x, ys)| {
                    let n = ys.len() as f64;
                    let mean = ys.iter().sum::<f64>() / n;
                    let sd = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt();
                    (x, mean, sd)
                })
                .collect();
            Series { name, points }
        })
        .collect())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

/// Renders series into an SVG document.
pub fn render_svg(series: &[Series], spec: &ChartSpec) -> Result<String> {
    if series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::Config("nothing to plot".into()));
    }
    let all = || series.iter().flat_map(|s| s.points.iter());
    let (x_lo, x_hi) = bounds(all().map(|p| p.0));
    let (y_lo, y_hi) = bounds(all().flat_map(|p| [p.1 - p.2, p.1 + p.2]));
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |x: f64| MARGIN_LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w;
    let sy = |y: f64| MARGIN_TOP + (1.0 - (y - y_lo) / (y_hi - y_lo)) * plot_h;

    let mut svg = String::new();
    let w = &mut svg;
    // Writing to a String cannot fail.
    let _ = writeln!(w, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">"#);
    let _ = writeln!(w, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(w, r#"<text x="{:.2}" y="28" font-size="18" text-anchor="middle">{}</text>"#, MARGIN_LEFT + plot_w / 2.0, escape(&spec.title));
    let _ = writeln!(w, r#"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{plot_w:.2}" height="{plot_h:.2}" fill="none" stroke="black"/>"#);

    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x_lo + f * (x_hi - x_lo), y_lo + f * (y_hi - y_lo));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(w, r#"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/>"#, MARGIN_TOP + plot_h, MARGIN_TOP + plot_h + 5.0);
        let _ = writeln!(w, r#"<text x="{px:.2}" y="{:.2}" font-size="12" text-anchor="middle">{}</text>"#, MARGIN_TOP + plot_h + 20.0, tick(xv));
        let _ = writeln!(w, r#"<line x1="{:.2}" y1="{py:.2}" x2="{MARGIN_LEFT}" y2="{py:.2}" stroke="black"/>"#, MARGIN_LEFT - 5.0);
        let _ = writeln!(w, r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="end">{}</text>"#, MARGIN_LEFT - 8.0, py + 4.0, tick(yv));
    }
    let _ = writeln!(w, r#"<text x="{:.2}" y="{:.2}" font-size="14" text-anchor="middle">{}</text>"#, MARGIN_LEFT + plot_w / 2.0, HEIGHT - 15.0, escape(&spec.x_label));
    let _ = writeln!(w, r#"<text x="20" y="{:.2}" font-size="14" text-anchor="middle" transform="rotate(-90 20 {:.2})">{}</text>"#, MARGIN_TOP + plot_h / 2.0, MARGIN_TOP + plot_h / 2.0, escape(&spec.y_label));

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let upper = s.points.iter().map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1 + p.2)));
        let lower = s.points.iter().rev().map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1 - p.2)));
        let band: Vec<String> = upper.chain(lower).collect();
        let _ = writeln!(w, r#"<polygon points="{}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#, band.join(" "));
        let line: Vec<String> = s.points.iter().map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1))).collect();
        let _ = writeln!(w, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, line.join(" "));
        let ly = MARGIN_TOP + 10.0 + 20.0 * i as f64;
        let lx = WIDTH - MARGIN_RIGHT + 15.0;
        let _ = writeln!(w, r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#, lx + 25.0);
        let _ = writeln!(w, r#"<text x="{:.2}" y="{:.2}" font-size="12">{}</text>"#, lx + 32.0, ly + 4.0, escape(&s.name));
    }
    let _ = writeln!(w, "</svg>");
    Ok(svg)
}

fn tick(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

/// Renders `csv_path` to `svg_path`. Nothing is written on error.
pub fn render_chart(csv_path: &Path, spec: &ChartSpec, svg_path: &Path) -> Result<()> {
    let text = fs::read_to_string(csv_path)?;
    let svg = render_svg(&load_series(&text, spec)?, spec)?;
    fs::write(svg_path, svg)?;
    Ok(())
}
