//! Epoch-log curves as standalone SVG plus a tidy CSV.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// One named column of the epoch log; empty cells are skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Reads an epoch CSV into one series per column after `epoch`.
pub fn read_epoch_log(path: &Path) -> Result<Vec<Series>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_epoch_log(&text, &path.display().to_string())
}

pub fn parse_epoch_log(text: &str, name: &str) -> Result<Vec<Series>> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: name.to_string(),
        line,
        message,
    };
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if headers.get(0) != Some("epoch") {
        return Err(parse_err(1, "first column must be `epoch`".into()));
    }
    let mut series: Vec<Series> = headers
        .iter()
        .skip(1)
        .map(|h| Series {
            name: h.to_string(),
            points: Vec::new(),
        })
        .collect();
    for (k, record) in reader.records().enumerate() {
        let line = k + 2;
        let record = record.map_err(|e| parse_err(line, e.to_string()))?;
        let epoch: f64 = record[0].parse().map_err(|_| parse_err(line, format!("bad epoch {:?}", &record[0])))?;
        for (s, cell) in series.iter_mut().zip(record.iter().skip(1)) {
            if cell.is_empty() {
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| parse_err(line, format!("bad value {cell:?} in {}", s.name)))?;
            s.points.push((epoch, v));
        }
    }
    Ok(series)
}

/// `epoch,series,value` rows; values are printed in their shortest exact form.
pub fn tidy_csv(series: &[Series]) -> String {
    let mut out = String::from("epoch,series,value\n");
    for s in series {
        for (x, y) in &s.points {
            let _ = writeln!(out, "{x},{},{y}", s.name);
        }
    }
    out
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Line chart of `series` with linear axes.
pub fn line_chart_svg(title: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 150.0, 40.0, 50.0);
    let points = series.iter().flat_map(|s| &s.points);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        if y.is_finite() {
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    if x1 - x0 <= 0.0 {
        (x0, x1) = (x0 - 0.5, x1 + 0.5);
    }
    if y1 - y0 <= 0.0 {
        let pad = y0.abs().max(1.0) * 0.05;
        (y0, y1) = (y0 - pad, y1 + pad);
    }
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        svg,
        r##"<path d="M{left} {top} V{} H{}" fill="none" stroke="#333"/>"##,
        h - bottom,
        w - right
    );
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            px(xv),
            h - bottom + 18.0,
            format_tick(xv)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            py(yv) + 4.0,
            format_tick(yv)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{}" text-anchor="middle">epoch</text>"#,
        left + (w - left - right) / 2.0,
        h - 12.0
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let finite: Vec<(f64, f64)> = s.points.iter().copied().filter(|(_, y)| y.is_finite()).collect();
        if finite.len() > 1 {
            let coords: Vec<String> = finite.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                coords.join(" ")
            );
        }
        for &(x, y) in &finite {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}" data-series="{}" data-epoch="{x}" data-value="{y}"/>"#,
                px(x),
                py(y),
                escape(&s.name)
            );
        }
        let ly = top + 16.0 * i as f64 + 8.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{}" y="{:.1}" width="12" height="3" fill="{color}"/><text x="{}" y="{:.1}">{}</text>"#,
            w - right + 12.0,
            ly - 2.0,
            w - right + 30.0,
            ly + 3.0,
            escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn format_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

const LOSS_SERIES: [&str; 5] = ["train_loss", "traj_loss", "act_loss", "dl_loss", "val_loss"];

/// Writes `loss.svg`, `metrics.svg` (when the log has metric columns) and `curves.csv`; returns the files written.
pub fn write_plots(series: &[Series], out: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let write = |name: &str, text: String| -> Result<String> {
        let path = out.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(name.to_string())
    };
    let (losses, others): (Vec<Series>, Vec<Series>) = series
        .iter()
        .filter(|s| s.name != "lr")
        .cloned()
        .partition(|s| LOSS_SERIES.contains(&s.name.as_str()));
    let mut written = vec![write("loss.svg", line_chart_svg("Loss", &losses))?];
    let others: Vec<Series> = others.into_iter().filter(|s| !s.points.is_empty()).collect();
    if !others.is_empty() {
        written.push(write("metrics.svg", line_chart_svg("Validation metrics", &others))?);
    }
    if let Some(lr) = series.iter().find(|s| s.name == "lr") {
        written.push(write("lr.svg", line_chart_svg("Learning rate", std::slice::from_ref(lr)))?);
    }
    written.push(write("curves.csv", tidy_csv(series))?);
    Ok(written)
}
