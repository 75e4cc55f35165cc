//! Metric reports and loss logs as text and CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mta_core::metrics::MetricsReport;
use mta_core::model::LossValues;
use mta_core::scenegen::CLASS_NAMES;

use crate::error::{HarnessError, Result};

/// `key = value` lines in the report's fixed order.
pub fn report_text(report: &MetricsReport) -> String {
    let mut s = String::new();
    for (k, v) in report.entries(&CLASS_NAMES) {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

/// Parses text written by [`report_text`].
pub fn parse_report_text(text: &str) -> Result<Vec<(String, f64)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| HarnessError::Data(format!("malformed report line {l:?}")))?;
            let v = v
                .trim()
                .parse()
                .map_err(|_| HarnessError::Data(format!("malformed report value {l:?}")))?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}

pub fn write_report(dir: &Path, report: &MetricsReport) -> Result<()> {
    let entries = report.entries(&CLASS_NAMES);
    let header: Vec<&str> = entries.iter().map(|(k, _)| k.as_str()).collect();
    let row: Vec<String> = entries.iter().map(|(_, v)| v.to_string()).collect();
    let csv = format!("{}\n{}\n", header.join(","), row.join(","));
    for (name, text) in [("report.txt", report_text(report)), ("report.csv", csv)] {
        let p = dir.join(name);
        fs::write(&p, text).map_err(HarnessError::io(&p))?;
    }
    Ok(())
}

pub const LOSS_HEADER: &str = "epoch,det,lm,bla,dca,total";
pub const STEP_HEADER: &str = "step,det,lm,bla,dca,total";

/// `det,lm,bla,dca,total`; absent alignment terms are empty cells.
pub fn loss_cells(l: &LossValues) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    format!("{},{},{},{},{}", l.det, l.lm, opt(l.bla), opt(l.dca), l.total)
}

/// One CSV row per epoch.
pub fn loss_csv(epochs: &[LossValues]) -> String {
    let mut s = format!("{LOSS_HEADER}\n");
    for (e, l) in epochs.iter().enumerate() {
        let _ = writeln!(s, "{e},{}", loss_cells(l));
    }
    s
}

pub fn parse_loss_csv(text: &str) -> Result<Vec<LossValues>> {
    let bad = |l: &str| HarnessError::Data(format!("malformed loss row {l:?}"));
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_HEADER) {
        return Err(HarnessError::Data("loss log lacks its header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(bad(l));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(l));
            let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
            Ok(LossValues {
                det: num(f[1])?,
                lm: num(f[2])?,
                bla: opt(f[3])?,
                dca: opt(f[4])?,
                total: num(f[5])?,
            })
        })
        .collect()
}
