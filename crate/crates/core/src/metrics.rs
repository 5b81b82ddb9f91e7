//! Metrics records: line-delimited JSON per run plus an aggregated CSV.
//!
//! The JSONL stream carries tagged records (`run`, `loss`, `recall`). The
//! CSV holds one row per `(arm, seed, fraction, direction, k)` with columns
//! `arm,seed,fraction,params,direction,k,recall`. Both formats are stable
//! interfaces for downstream tooling.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::eval::RetrievalReport;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MetricRecord {
    /// One per run: identity and scale of the run.
    Run {
        arm: Option<String>,
        seed: u64,
        fraction: f64,
        params: usize,
        config_hash: String,
        steps: usize,
    },
    /// One per training step.
    Loss { step: usize, value: f32 },
    /// One per (split, direction, k) evaluation.
    Recall {
        arm: Option<String>,
        seed: u64,
        fraction: f64,
        params: usize,
        split: String,
        direction: String,
        k: usize,
        recall: f64,
        /// Training step for periodic evaluations; absent for final ones.
        #[serde(skip_serializing_if = "Option::is_none")]
        step: Option<usize>,
    },
}

/// Expand a retrieval report into per-k recall records.
pub fn recall_records(
    report: &RetrievalReport,
    arm: Option<&str>,
    params: usize,
    split: &str,
    step: Option<usize>,
) -> Vec<MetricRecord> {
    report
        .recall
        .iter()
        .map(|&(k, recall)| MetricRecord::Recall {
            arm: arm.map(str::to_string),
            seed: report.seed,
            fraction: report.train_fraction,
            params,
            split: split.to_string(),
            direction: report.direction.name().to_string(),
            k,
            recall,
            step,
        })
        .collect()
}

pub fn write_jsonl(path: &Path, records: &[MetricRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut file = std::fs::File::create(path)?;
    for record in records {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(file, "{line}")?;
    }
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            serde_json::from_str(line)
                .map_err(|e| crate::Error::Input(format!("metrics record: {e}")))
        })
        .collect()
}

/// One aggregated-CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub arm: String,
    pub seed: u64,
    pub fraction: f64,
    pub params: usize,
    pub direction: String,
    pub k: usize,
    pub recall: f64,
}

pub const CSV_HEADER: &str = "arm,seed,fraction,params,direction,k,recall";

pub fn write_csv(path: &Path, rows: &[CsvRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            file,
            "{},{},{},{},{},{},{}",
            r.arm, r.seed, r.fraction, r.params, r.direction, r.k, r.recall
        )?;
    }
    Ok(())
}
