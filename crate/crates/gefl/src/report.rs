//! Run reports: JSON for machine comparison, CSV traces for plotting,
//! and the across-seed summary table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::fed::loops::Trace;
use crate::metrics::{CommLedger, MndReport};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Exact trace CSV header.
pub const CSV_HEADER: &str = "round,stage,arch,accuracy,loss,comm_up_floats,comm_down_floats";

/// Everything one experiment run produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    /// Emitted config text; rerunning it with `seed` reproduces this run.
    pub config: String,
    pub method: String,
    pub seed: u64,
    pub trace: Trace,
    pub final_per_arch: BTreeMap<usize, f64>,
    pub final_mean_accuracy: f64,
    pub comm: CommLedger,
    pub mnd: Option<MndReport>,
    pub wall_time_secs: f64,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Parse(format!("report serialization failed: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: RunReport = serde_json::from_str(text)
            .map_err(|e| Error::Parse(format!("bad report JSON: {e}")))?;
        if report.schema_version != SCHEMA_VERSION {
            return Err(Error::Parse(format!(
                "unsupported report schema {}",
                report.schema_version
            )));
        }
        Ok(report)
    }
}

/// Renders the round trace as CSV; repeated runs with one seed produce
/// byte-identical output.
pub fn trace_to_csv(trace: &Trace) -> String {
    let mut out = String::new();
    writeln!(out, "{CSV_HEADER}").unwrap();
    for row in &trace.rows {
        let acc = row.accuracy.map(|a| a.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            row.round, row.stage, row.arch, acc, row.loss, row.comm_up_floats, row.comm_down_floats
        )
        .unwrap();
    }
    out
}

pub fn report_file_name(seed: u64) -> String {
    format!("report_seed{seed}.json")
}

pub fn trace_file_name(seed: u64) -> String {
    format!("trace_seed{seed}.csv")
}

/// Mean and spread of final accuracy across the seeds of one config.
#[derive(Debug, Clone, Serialize)]
pub struct SeedSummary {
    pub method: String,
    pub seeds: Vec<u64>,
    pub mean: f64,
    /// Half-width of the normal-approximation 95% interval over seeds.
    pub spread: f64,
}

/// Groups reports by their echoed config and summarizes final accuracy.
pub fn summarize(reports: &[RunReport]) -> Vec<SeedSummary> {
    let mut groups: BTreeMap<&str, Vec<&RunReport>> = BTreeMap::new();
    for r in reports {
        groups.entry(r.config.as_str()).or_default().push(r);
    }
    groups
        .into_values()
        .map(|mut rs| {
            rs.sort_by_key(|r| r.seed);
            let vals: Vec<f64> = rs.iter().map(|r| r.final_mean_accuracy).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let spread = if vals.len() < 2 {
                0.0
            } else {
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
                1.96 * (var / n).sqrt()
            };
            SeedSummary {
                method: rs[0].method.clone(),
                seeds: rs.iter().map(|r| r.seed).collect(),
                mean,
                spread,
            }
        })
        .collect()
}

/// Loads every `report_*.json` under a directory, sorted by file name.
pub fn load_reports(dir: &Path) -> Result<Vec<RunReport>> {
    let mut names: Vec<std::path::PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("report_") && n.ends_with(".json"))
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Domain(format!("no report_*.json files under {}", dir.display())));
    }
    names
        .into_iter()
        .map(|p| RunReport::from_json(&std::fs::read_to_string(p)?))
        .collect()
}
