//! CSV and JSON metrics output.

use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One row per (kernel, n, method). Times in seconds, storage in GB.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    #[serde(rename = "Kernel")]
    pub kernel: String,
    #[serde(rename = "n")]
    pub n: usize,
    #[serde(rename = "Method")]
    pub method: String,
    #[serde(rename = "Storage")]
    pub storage_gb: f64,
    #[serde(rename = "Offline Time")]
    pub offline_time: f64,
    #[serde(rename = "NF Time")]
    pub nf_time: f64,
    #[serde(rename = "FF Time")]
    pub ff_time: f64,
    #[serde(rename = "Online Time")]
    pub online_time: f64,
    #[serde(rename = "NF Ratio")]
    pub nf_ratio: f64,
    #[serde(rename = "FF Ratio")]
    pub ff_ratio: f64,
    #[serde(rename = "Coupling Ratio")]
    pub coupling_ratio: Option<f64>,
    #[serde(rename = "Rank")]
    pub rank: f64,
    #[serde(rename = "MVM")]
    pub mvm_time: f64,
    #[serde(rename = "Error")]
    pub error: f64,
    #[serde(rename = "Offline Evals")]
    pub offline_evals: u64,
    #[serde(rename = "Online Evals")]
    pub online_evals: u64,
    #[serde(rename = "Baseline Evals")]
    pub baseline_evals: u64,
    #[serde(rename = "Audit Evals")]
    pub audit_evals: u64,
    #[serde(rename = "C_sp")]
    pub c_sp: usize,
    #[serde(rename = "M_A")]
    pub m_a: usize,
    #[serde(rename = "Far Blocks")]
    pub far_blocks: usize,
    #[serde(rename = "Near Blocks")]
    pub near_blocks: usize,
    #[serde(rename = "Storage Entries")]
    pub storage_entries: u64,
    #[serde(rename = "NF Entries")]
    pub nf_entries: u64,
    #[serde(rename = "FF Entries")]
    pub ff_entries: u64,
    #[serde(rename = "Coupling Entries")]
    pub coupling_entries: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaSample {
    pub theta: Vec<f64>,
    pub nf_time: f64,
    pub ff_time: f64,
    pub mvm_time: f64,
    pub error: f64,
}

/// JSON form of a run: resolved config, the summary row and per-sample detail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: String,
    pub record: MetricsRecord,
    pub samples: Vec<ThetaSample>,
}

/// Appends rows, writing the header only when the file is new or empty.
pub fn append_csv(path: &Path, rows: &[MetricsRecord]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<MetricsRecord>, _>>()?;
    Ok(rows)
}

pub fn write_json(path: &Path, report: &RunReport) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

/// Label/value table for the terminal.
pub fn summary(r: &MetricsRecord) -> String {
    let coupling = r.coupling_ratio.map_or_else(|| "-".to_string(), |c| format!("{c:.3e}"));
    let rows = [
        ("Kernel", r.kernel.clone()),
        ("n", r.n.to_string()),
        ("Method", r.method.clone()),
        ("Storage (GB)", format!("{:.4e}", r.storage_gb)),
        ("Offline Time (s)", format!("{:.3}", r.offline_time)),
        ("NF Time (s)", format!("{:.4}", r.nf_time)),
        ("FF Time (s)", format!("{:.4}", r.ff_time)),
        ("Online Time (s)", format!("{:.4}", r.online_time)),
        ("NF Ratio", format!("{:.4}", r.nf_ratio)),
        ("FF Ratio", format!("{:.4}", r.ff_ratio)),
        ("Coupling Ratio", coupling),
        ("Rank", format!("{:.2}", r.rank)),
        ("MVM (s)", format!("{:.4}", r.mvm_time)),
        ("Error", format!("{:.3e}", r.error)),
        ("Offline Evals", r.offline_evals.to_string()),
        ("Online Evals", r.online_evals.to_string()),
        ("Baseline Evals", r.baseline_evals.to_string()),
        ("C_sp", r.c_sp.to_string()),
        ("M_A", r.m_a.to_string()),
    ];
    rows.iter().map(|(k, v)| format!("{k:<18}{v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, coupling: Option<f64>) -> MetricsRecord {
        MetricsRecord {
            kernel: "se".into(),
            n: 512,
            method: method.into(),
            storage_gb: 1e-3,
            offline_time: 1.5,
            nf_time: 0.25,
            ff_time: 0.5,
            online_time: 0.75,
            nf_ratio: 0.2,
            ff_ratio: 0.01,
            coupling_ratio: coupling,
            rank: 7.5,
            mvm_time: 0.01,
            error: 3e-7,
            offline_evals: 10,
            online_evals: 0,
            baseline_evals: 0,
            audit_evals: 5,
            c_sp: 27,
            m_a: 100,
            far_blocks: 300,
            near_blocks: 400,
            storage_entries: 125_000,
            nf_entries: 5,
            ff_entries: 6,
            coupling_entries: coupling.map(|_| 9),
        }
    }

    #[test]
    fn csv_append_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        append_csv(&p, &[row("param-h", None)]).unwrap();
        append_csv(&p, &[row("param-h2", Some(1e-4))]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("Kernel,n,Method,Storage,Offline Time,NF Time,FF Time,Online Time,NF Ratio,FF Ratio,Coupling Ratio,Rank,MVM,Error"));
        let back = read_csv(&p).unwrap();
        assert_eq!(back, vec![row("param-h", None), row("param-h2", Some(1e-4))]);
    }
}
