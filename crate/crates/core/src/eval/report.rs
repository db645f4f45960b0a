use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{bar_chart_png, MetricReport, METRICS};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub table: PathBuf,
    pub json: PathBuf,
    pub charts: Vec<PathBuf>,
}

/// Markdown table with one row per report and an `Avg.+%` column relative
/// to the first report.
pub fn render_table(reports: &[MetricReport]) -> String {
    let base = &reports[0];
    let mut s = String::new();
    let _ = writeln!(
        s,
        "| Model | {} | Avg.+% | Fingerprint |",
        METRICS.join(" | ")
    );
    let _ = writeln!(s, "|---|{}---|---|", "---|".repeat(METRICS.len()));
    for (i, r) in reports.iter().enumerate() {
        let cells: Vec<String> = r.values().iter().map(|v| format!("{v:.4}")).collect();
        let imp = if i == 0 {
            "-".to_string()
        } else {
            super::improvement_percent(r, base)
                .percent
                .map_or("n/a".into(), |p| format!("{p:+.2}"))
        };
        let fp = r
            .fingerprint
            .as_deref()
            .map_or("-".to_string(), |f| f.chars().take(12).collect());
        let _ = writeln!(s, "| {} | {} | {imp} | {fp} |", r.name, cells.join(" | "));
    }
    s
}

/// File names written by [`emit_report`], table and JSON first.
pub fn report_file_names() -> Vec<String> {
    let mut names = vec!["comparison.md".to_string(), "comparison.json".to_string()];
    names.extend(METRICS.iter().map(|m| format!("{}.png", m.to_lowercase())));
    names
}

/// Writes `comparison.md`, `comparison.json` and one bar chart per metric.
pub fn emit_report(reports: &[MetricReport], out_dir: &Path) -> Result<ReportFiles> {
    if reports.is_empty() {
        return Err(Error::InvalidInput("no reports to compare".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let names = report_file_names();
    let table = out_dir.join(&names[0]);
    fs::write(&table, render_table(reports)).map_err(|e| Error::io(&table, e))?;
    let compared: Vec<MetricReport> = reports
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if i == 0 {
                r.clone()
            } else {
                r.clone().compared_to(&reports[0])
            }
        })
        .collect();
    let json = out_dir.join(&names[1]);
    let text = serde_json::to_string_pretty(&compared).expect("reports serialize");
    fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
    let mut charts = Vec::with_capacity(METRICS.len());
    for (m, name) in names[2..].iter().enumerate() {
        let path = out_dir.join(name);
        let values: Vec<f64> = reports.iter().map(|r| r.values()[m]).collect();
        bar_chart_png(&values, &path)?;
        charts.push(path);
    }
    Ok(ReportFiles {
        table,
        json,
        charts,
    })
}
