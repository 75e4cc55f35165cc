//! SVG loss curves, metric bars, a metrics CSV and a manifest listing
//! every emitted file with its SHA-256.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::error::{HarnessError, Result};
use crate::harness::{LossRow, RunRecord, ABLATION_METRICS};

pub const LOSS_COMPONENTS: [&str; 5] = ["det", "lm", "bla", "dca", "total"];

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn component(row: &LossRow, name: &str) -> Option<f64> {
    match name {
        "det" => Some(row.det),
        "lm" => Some(row.lm),
        "bla" => row.bla,
        "dca" => row.dca,
        "total" => Some(row.total),
        _ => None,
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn svg_open(title: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        WIDTH / 2.0,
        escape(title)
    );
    s
}

fn axes(s: &mut String, lo: f64, hi: f64, x_label: &str) {
    let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, MARGIN);
    let _ = writeln!(s, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>");
    let _ = writeln!(s, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>");
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let y = y0 - (y0 - y1) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            x0 - 4.0,
            y + 4.0,
            tick(v)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
        (x0 + x1) / 2.0,
        HEIGHT - 16.0,
        escape(x_label)
    );
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.4}")
    }
}

fn legend(s: &mut String, labels: &[&str]) {
    for (i, l) in labels.iter().enumerate() {
        let y = MARGIN + 14.0 * i as f64;
        let x = WIDTH - MARGIN - 150.0;
        let _ = writeln!(
            s,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/>",
            y - 9.0,
            PALETTE[i % PALETTE.len()]
        );
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{y:.1}\">{}</text>", x + 14.0, escape(l));
    }
}

fn range_of(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let lo = lo.min(0.0);
    if hi <= lo {
        (lo, lo + 1.0)
    } else {
        (lo, hi)
    }
}

/// One polyline per run for one loss component.
pub fn loss_svg(runs: &[(String, RunRecord)], name: &str) -> String {
    let mut s = svg_open(&format!("{name} loss per epoch"));
    let (lo, hi) = range_of(runs.iter().flat_map(|(_, r)| r.epochs.iter().filter_map(|e| component(e, name))));
    axes(&mut s, lo, hi, "epoch");
    let max_epochs = runs.iter().map(|(_, r)| r.epochs.len()).max().unwrap_or(1).max(2);
    let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, MARGIN);
    for (i, (_, r)) in runs.iter().enumerate() {
        let points: Vec<String> = r
            .epochs
            .iter()
            .enumerate()
            .filter_map(|(e, row)| component(row, name).map(|v| (e, v)))
            .map(|(e, v)| {
                let x = x0 + (x1 - x0) * e as f64 / (max_epochs - 1) as f64;
                let y = y0 - (y0 - y1) * (v - lo) / (hi - lo);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        if points.is_empty() {
            continue;
        }
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>",
            PALETTE[i % PALETTE.len()],
            points.join(" ")
        );
    }
    let labels: Vec<&str> = runs.iter().map(|(l, _)| l.as_str()).collect();
    legend(&mut s, &labels);
    s.push_str("</svg>\n");
    s
}

/// Grouped bars: one group per metric, one bar per run.
pub fn metrics_svg(runs: &[(String, RunRecord)]) -> String {
    let mut s = svg_open("validation metrics");
    let (lo, hi) = range_of(
        runs.iter()
            .flat_map(|(_, r)| ABLATION_METRICS.iter().filter_map(|k| r.metric(k))),
    );
    axes(&mut s, lo, hi, "metric");
    let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, MARGIN);
    let group = (x1 - x0) / ABLATION_METRICS.len() as f64;
    let bar = 0.8 * group / runs.len() as f64;
    let base = y0 - (y0 - y1) * (0.0 - lo) / (hi - lo);
    for (m, key) in ABLATION_METRICS.iter().enumerate() {
        let gx = x0 + group * m as f64 + 0.1 * group;
        for (i, (_, r)) in runs.iter().enumerate() {
            let v = r.metric(key).unwrap_or(0.0);
            let y = y0 - (y0 - y1) * (v - lo) / (hi - lo);
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{bar:.2}\" height=\"{:.2}\" fill=\"{}\"/>",
                gx + bar * i as f64,
                y.min(base),
                (y - base).abs(),
                PALETTE[i % PALETTE.len()]
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            gx + 0.4 * group,
            y0 + 14.0,
            escape(key)
        );
    }
    let labels: Vec<&str> = runs.iter().map(|(l, _)| l.as_str()).collect();
    legend(&mut s, &labels);
    s.push_str("</svg>\n");
    s
}

pub fn metrics_csv(runs: &[(String, RunRecord)]) -> String {
    let mut s = format!("run,{}\n", ABLATION_METRICS.join(","));
    for (label, r) in runs {
        let vals: Vec<String> = ABLATION_METRICS
            .iter()
            .map(|k| r.metric(k).map(|v| v.to_string()).unwrap_or_default())
            .collect();
        let _ = writeln!(s, "{label},{}", vals.join(","));
    }
    s
}

/// Writes the plot files and `manifest.txt` into `out`; returns the paths
/// written, manifest last.
pub fn plot(runs: &[(String, RunRecord)], out: &Path) -> Result<Vec<PathBuf>> {
    if runs.is_empty() {
        return Err(HarnessError::Config("plot needs at least one run record".into()));
    }
    fs::create_dir_all(out).map_err(HarnessError::io(out))?;
    let mut files: Vec<(String, String)> = LOSS_COMPONENTS
        .iter()
        .map(|c| (format!("loss-{c}.svg"), loss_svg(runs, c)))
        .collect();
    files.push(("metrics.svg".into(), metrics_svg(runs)));
    files.push(("metrics.csv".into(), metrics_csv(runs)));
    let mut manifest = String::new();
    let mut paths = Vec::new();
    for (name, text) in &files {
        let p = out.join(name);
        fs::write(&p, text).map_err(HarnessError::io(&p))?;
        let _ = writeln!(manifest, "{name} {} {}", text.len(), hex(&Sha256::digest(text.as_bytes())));
        paths.push(p);
    }
    let p = out.join("manifest.txt");
    fs::write(&p, manifest).map_err(HarnessError::io(&p))?;
    paths.push(p);
    Ok(paths)
}
