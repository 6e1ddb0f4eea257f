//! Report files: `accuracy_matrix.csv`, one confusion CSV per cell,
//! `report.json` and an SVG bar chart.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use lcpred_core::Label;

use crate::protocol::AccuracyMatrix;
use crate::ExperimentError;

pub const MATRIX_FILE: &str = "accuracy_matrix.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CHART_FILE: &str = "accuracy_matrix.svg";

/// An input artifact and its content digest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<InputRef>,
    pub matrix: AccuracyMatrix,
}

pub fn confusion_file(regime: &str, population: &str) -> String {
    format!("confusion_{regime}_{population}.csv")
}

pub fn matrix_csv(m: &AccuracyMatrix) -> String {
    let mut out = String::from("regime");
    for p in &m.populations {
        let _ = write!(out, ",{p},{p}_std");
    }
    out.push('\n');
    for (r, row) in m.regimes.iter().zip(&m.cells) {
        out.push_str(r);
        for c in row {
            let _ = write!(out, ",{:.4},{:.4}", c.mean, c.std);
        }
        out.push('\n');
    }
    out
}

pub fn confusion_csv(confusion: &[[usize; 3]; 3]) -> String {
    let mut out = String::from("true\\predicted");
    for l in Label::ALL {
        let _ = write!(out, ",{l}");
    }
    out.push('\n');
    for (l, row) in Label::ALL.iter().zip(confusion) {
        let _ = writeln!(out, "{l},{},{},{}", row[0], row[1], row[2]);
    }
    out
}

const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

/// Grouped bars: one group per training regime, one bar per test population,
/// with a whisker of one standard deviation.
pub fn matrix_svg(m: &AccuracyMatrix) -> String {
    let (w, h) = (640.0, 360.0);
    let (left, right, top, bottom) = (56.0, 16.0, 24.0, 64.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let groups = m.regimes.len().max(1) as f64;
    let bars = m.populations.len().max(1) as f64;
    let group_w = plot_w / groups;
    let bar_w = group_w * 0.8 / bars;
    let y = |v: f64| top + plot_h * (1.0 - v.clamp(0.0, 1.0));
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"##,
            w - right,
            y(v),
            y(v),
            left - 6.0,
            y(v) + 4.0
        );
    }
    for (g, (regime, row)) in m.regimes.iter().zip(&m.cells).enumerate() {
        let gx = left + group_w * g as f64 + group_w * 0.1;
        for (b, cell) in row.iter().enumerate() {
            let x = gx + bar_w * b as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"><title>{regime} / {}: {:.4} ± {:.4}</title></rect>"#,
                y(cell.mean),
                bar_w * 0.9,
                y(0.0) - y(cell.mean),
                PALETTE[b % PALETTE.len()],
                m.populations[b],
                cell.mean,
                cell.std
            );
            let cx = x + bar_w * 0.45;
            let _ = writeln!(
                s,
                r#"<line x1="{cx:.1}" x2="{cx:.1}" y1="{:.1}" y2="{:.1}" stroke="black"/>"#,
                y(cell.mean + cell.std),
                y(cell.mean - cell.std)
            );
        }
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">train {regime}</text>"#, gx + group_w * 0.4, h - bottom + 18.0);
    }
    for (b, p) in m.populations.iter().enumerate() {
        let x = left + 120.0 * b as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{x:.1}" y="{:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{:.1}">test {p}</text>"#,
            h - 22.0,
            PALETTE[b % PALETTE.len()],
            x + 16.0,
            h - 12.0
        );
    }
    let _ = writeln!(s, r#"<text x="{left}" y="16">accuracy (mean ± std over {} seeds)</text>"#, m.seeds.len());
    s.push_str("</svg>\n");
    s
}

/// Writes every report file into `out_dir`; nothing is written for an empty matrix.
pub fn emit_report(report: &Report, out_dir: &Path) -> Result<Vec<String>, ExperimentError> {
    let m = &report.matrix;
    if m.is_empty() {
        return Err(ExperimentError::Data { stage: "report", message: "empty accuracy matrix".into() });
    }
    fs::create_dir_all(out_dir).map_err(|e| ExperimentError::io(out_dir, e))?;
    let mut files = vec![(MATRIX_FILE.to_string(), matrix_csv(m))];
    for (r, row) in m.regimes.iter().zip(&m.cells) {
        for (p, cell) in m.populations.iter().zip(row) {
            files.push((confusion_file(r, p), confusion_csv(&cell.confusion)));
        }
    }
    files.push((REPORT_FILE.to_string(), serde_json::to_string_pretty(report).expect("report serializes") + "\n"));
    files.push((CHART_FILE.to_string(), matrix_svg(m)));
    let mut written = Vec::new();
    for (name, body) in files {
        let path = out_dir.join(&name);
        fs::write(&path, body).map_err(|e| ExperimentError::io(&path, e))?;
        written.push(name);
    }
    Ok(written)
}

pub fn load_report(path: &Path) -> Result<Report, ExperimentError> {
    let text = fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| ExperimentError::Data { stage: "report", message: format!("{}: {e}", path.display()) })
}
