//! Deterministic SVG charts of training histories and ablation summaries.
//!
//! Every file is rendered in memory first; nothing is written unless all
//! renders succeed, and files are moved into place only after every
//! temporary file was written.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sgtc::cotrain::{parse_history, HistoryRow, EDGES};

use crate::ablation::{parse_summary_csv, CellSummary};
use crate::error::{CliError, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Rounded so output never depends on the last bits of a float.
fn n(v: f64) -> String {
    format!("{v:.2}")
}

fn tick_label(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo.abs() > 0.0 { lo.abs() * 0.1 } else { 1.0 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

fn header(title: &str, out: &mut String) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#,
        w = WIDTH,
        h = HEIGHT
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, n(WIDTH / 2.0), escape(title));
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn y_axis(y_lo: f64, y_hi: f64, y_of: &impl Fn(f64) -> f64, out: &mut String) {
    let x1 = WIDTH - RIGHT;
    for i in 0..=4 {
        let v = y_lo + (y_hi - y_lo) * i as f64 / 4.0;
        let y = y_of(v);
        let _ = writeln!(out, r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#dddddd"/>"##, n(LEFT), n(y), n(x1), n(y));
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, n(LEFT - 6.0), n(y + 4.0), tick_label(v));
    }
    let _ = writeln!(
        out,
        r#"<line x1="{l}" y1="{t}" x2="{l}" y2="{b}" stroke="black"/>"#,
        l = n(LEFT),
        t = n(TOP),
        b = n(HEIGHT - BOTTOM)
    );
}

/// Line chart of one or more series over a shared x axis.
pub fn line_chart(title: &str, x_label: &str, series: &[Series]) -> String {
    let (x_lo, x_hi) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y_lo, y_hi) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let x_of = |x: f64| LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w;
    let y_of = |y: f64| TOP + (1.0 - (y - y_lo) / (y_hi - y_lo)) * plot_h;

    let mut out = String::new();
    header(title, &mut out);
    y_axis(y_lo, y_hi, &y_of, &mut out);
    let base = HEIGHT - BOTTOM;
    let _ = writeln!(out, r#"<line x1="{}" y1="{b}" x2="{}" y2="{b}" stroke="black"/>"#, n(LEFT), n(WIDTH - RIGHT), b = n(base));
    for i in 0..=4 {
        let v = x_lo + (x_hi - x_lo) * i as f64 / 4.0;
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, n(x_of(v)), n(base + 16.0), tick_label(v));
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, n(LEFT + plot_w / 2.0), n(HEIGHT - 12.0), escape(x_label));
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{},{}", n(x_of(x)), n(y_of(y))))
            .collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        let ly = TOP + 16.0 * k as f64 + 8.0;
        let lx = WIDTH - RIGHT + 12.0;
        let _ = writeln!(out, r#"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/>"#, n(lx), n(lx + 18.0), y = n(ly));
        let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, n(lx + 24.0), n(ly + 4.0), escape(&s.name));
    }
    out.push_str("</svg>\n");
    out
}

/// Bar chart of cell means with ±1 std whiskers.
pub fn bar_chart(title: &str, cells: &[CellSummary]) -> String {
    let (_, y_hi) = range(cells.iter().map(|c| c.mean + c.std).chain([0.0]));
    let y_hi = y_hi.max(1e-9);
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let y_of = |y: f64| TOP + (1.0 - y / y_hi) * plot_h;
    let slot = plot_w / cells.len() as f64;

    let mut out = String::new();
    header(title, &mut out);
    y_axis(0.0, y_hi, &y_of, &mut out);
    let base = HEIGHT - BOTTOM;
    let _ = writeln!(out, r#"<line x1="{}" y1="{b}" x2="{}" y2="{b}" stroke="black"/>"#, n(LEFT), n(WIDTH - RIGHT), b = n(base));
    for (k, c) in cells.iter().enumerate() {
        let cx = LEFT + slot * (k as f64 + 0.5);
        let mean = if c.mean.is_finite() { c.mean } else { 0.0 };
        let std = if c.std.is_finite() { c.std } else { 0.0 };
        let color = PALETTE[k % PALETTE.len()];
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{color}"/>"#,
            n(cx - slot * 0.3),
            n(y_of(mean)),
            n(slot * 0.6),
            n(base - y_of(mean))
        );
        let _ = writeln!(
            out,
            r#"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="black"/>"#,
            n(y_of((mean - std).max(0.0))),
            n(y_of(mean + std)),
            x = n(cx)
        );
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, n(cx), n(base + 16.0), escape(&c.name));
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, n(cx), n(y_of(mean) - 4.0), tick_label(mean));
    }
    out.push_str("</svg>\n");
    out
}

/// One chart per tracked series of a training history.
pub fn history_charts(rows: &[HistoryRow]) -> Result<Vec<(String, String)>> {
    if rows.is_empty() {
        return Err(CliError::Runtime("history has no rows".into()));
    }
    let t = |r: &HistoryRow| r.t as f64;
    let per_role = |k: usize| -> Vec<Series> {
        ["S", "C", "A"]
            .iter()
            .enumerate()
            .map(|(r, name)| Series {
                name: format!("role {name}"),
                points: rows.iter().map(|row| (t(row), row.losses[r][k])).collect(),
            })
            .collect()
    };
    let single = |name: &str, f: fn(&HistoryRow) -> f64| {
        vec![Series {
            name: name.into(),
            points: rows.iter().map(|row| (t(row), f(row))).collect(),
        }]
    };
    let edges: Vec<Series> = EDGES
        .iter()
        .enumerate()
        .map(|(e, (p, c))| Series {
            name: format!("{p} to {c}"),
            points: rows.iter().map(|row| (t(row), row.selected[e])).collect(),
        })
        .collect();
    let charts = [
        ("loss_wce", "weighted cross-entropy", per_role(0)),
        ("loss_dice", "weighted Dice loss", per_role(1)),
        ("loss_sup", "supervised loss", per_role(2)),
        ("loss_tvdt", "cross-supervision loss", per_role(3)),
        ("loss_total", "total loss", per_role(4)),
        ("alpha", "alpha", single("alpha", |r| r.alpha)),
        ("lr", "learning rate", single("lr", |r| r.lr)),
        ("selected_fraction", "selected fraction per edge", edges),
    ];
    Ok(charts
        .into_iter()
        .map(|(file, title, series)| (format!("{file}.svg"), line_chart(title, "iteration", &series)))
        .collect())
}

pub fn summary_charts(cells: &[CellSummary]) -> Result<Vec<(String, String)>> {
    if cells.is_empty() {
        return Err(CliError::Runtime("summary has no cells".into()));
    }
    Ok(vec![("summary.svg".into(), bar_chart("mean test Dice (±1 std over seeds)", cells))])
}

/// Renders charts for a history or summary CSV, chosen by its header.
pub fn render_csv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let with_path = |e: CliError| match e {
        CliError::Core(sgtc::Error::Parse { line, message }) => CliError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        },
        other => other,
    };
    if text.starts_with("cell,") {
        summary_charts(&parse_summary_csv(&text).map_err(with_path)?)
    } else if text.trim().is_empty() {
        Err(CliError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "file is empty".into(),
        })
    } else {
        let rows = parse_history(&text).map_err(|e| with_path(e.into()))?;
        history_charts(&rows)
    }
}

/// Writes all files or none: temporaries first, then renames.
pub fn write_files(dir: &Path, files: &[(String, String)]) -> Result<Vec<PathBuf>> {
    if files.is_empty() {
        return Err(CliError::Runtime("nothing to write".into()));
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut temps = Vec::with_capacity(files.len());
    for (name, body) in files {
        let tmp = dir.join(format!(".{name}.tmp"));
        if let Err(e) = fs::write(&tmp, body) {
            for t in &temps {
                let _ = fs::remove_file(t);
            }
            return Err(CliError::io(&tmp, e));
        }
        temps.push(tmp);
    }
    let mut out = Vec::with_capacity(files.len());
    for ((name, _), tmp) in files.iter().zip(&temps) {
        let dst = dir.join(name);
        fs::rename(tmp, &dst).map_err(|e| CliError::io(&dst, e))?;
        out.push(dst);
    }
    Ok(out)
}

/// Renders `input` into `out_dir`; returns the written paths.
pub fn plot(input: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let files = render_csv(input)?;
    write_files(out_dir, &files)
}
