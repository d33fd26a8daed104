//! Tables over finished run directories.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::Approach;
use super::run::RunReport;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub run: String,
    pub approach: Approach,
    pub n_test: usize,
    pub verb: Option<f64>,
    pub noun: Option<f64>,
    pub action: Option<f64>,
}

pub fn load_report(dir: &Path) -> Result<RunReport> {
    let path = dir.join("report.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Run directories directly under `root` that contain a `report.json`,
/// sorted by path.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("report.json").is_file())
        .collect();
    out.sort();
    Ok(out)
}

pub fn collect_rows(dirs: &[PathBuf]) -> Result<Vec<ReportRow>> {
    dirs.iter()
        .map(|d| {
            let r = load_report(d)?;
            Ok(ReportRow {
                run: r.name,
                approach: r.approach,
                n_test: r.n_test_instances,
                verb: r.ed.as_ref().map(|e| e.verb_ed),
                noun: r.ed.as_ref().map(|e| e.noun_ed),
                action: r.ed.as_ref().map(|e| e.action_ed),
            })
        })
        .collect()
}

/// Markdown table, one row per run.
pub fn render_table(rows: &[ReportRow]) -> String {
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    let mut out =
        String::from("| run | approach | n_test | verb ED | noun ED | action ED |\n|---|---|---:|---:|---:|---:|\n");
    for r in rows {
        let approach =
            serde_json::to_value(r.approach).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} |",
            r.run,
            approach,
            r.n_test,
            cell(r.verb),
            cell(r.noun),
            cell(r.action)
        );
    }
    out
}
