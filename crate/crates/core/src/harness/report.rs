use std::fs::{self, File};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PointResult;
use crate::error::{bail, Result};

/// One fine-tune (or baseline fit) evaluated on the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub axis: usize,
    pub seed: u64,
    pub miou: f64,
    pub wallclock_s: f64,
}

/// Mean and sample standard deviation over seeds at one axis value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub experiment: String,
    pub axis: usize,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub wallclock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: String,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    pub fn new(kind: &str, seeds: Vec<u64>, config_hash: String) -> Self {
        ExperimentReport { kind: kind.to_string(), seeds, config_hash, rows: Vec::new() }
    }

    pub fn push(&mut self, experiment: &str, axis: usize, seed: u64, point: PointResult) {
        self.rows.push(ReportRow { experiment: experiment.to_string(), axis, seed, miou: point.miou, wallclock_s: point.wallclock_s });
    }

    /// Points in first-seen order.
    pub fn summary(&self) -> Vec<PointSummary> {
        let mut keys: Vec<(&str, usize)> = Vec::new();
        for r in &self.rows {
            if !keys.contains(&(r.experiment.as_str(), r.axis)) {
                keys.push((r.experiment.as_str(), r.axis));
            }
        }
        keys.into_iter()
            .map(|(e, a)| {
                let pts: Vec<&ReportRow> = self.rows.iter().filter(|r| r.experiment == e && r.axis == a).collect();
                let n = pts.len();
                let mean = pts.iter().map(|r| r.miou).sum::<f64>() / n as f64;
                let var = if n > 1 { pts.iter().map(|r| (r.miou - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
                PointSummary {
                    experiment: e.to_string(),
                    axis: a,
                    mean,
                    std: var.sqrt(),
                    n,
                    wallclock_s: pts.iter().map(|r| r.wallclock_s).sum(),
                }
            })
            .collect()
    }

    pub fn mean(&self, experiment: &str, axis: usize) -> Option<f64> {
        self.summary().into_iter().find(|p| p.experiment == experiment && p.axis == axis).map(|p| p.mean)
    }

    /// Per-seed mIoU at one point, in row order.
    pub fn values(&self, experiment: &str, axis: usize) -> Vec<f64> {
        self.rows.iter().filter(|r| r.experiment == experiment && r.axis == axis).map(|r| r.miou).collect()
    }

    /// `experiment,axis,seed,miou,wallclock_s`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for r in &self.rows {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Vec<ReportRow>> {
        let mut r = csv::Reader::from_reader(File::open(path)?);
        let header = r.headers().map_err(csv_err)?.clone();
        if header.iter().collect::<Vec<_>>() != ["experiment", "axis", "seed", "miou", "wallclock_s"] {
            bail!(Format, "{}: unexpected report header {:?}", path.display(), header);
        }
        r.deserialize().map(|row| row.map_err(csv_err)).collect()
    }

    /// Summary plus rows; the CSV carries only rows.
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let body = serde_json::json!({
            "kind": self.kind,
            "seeds": self.seeds,
            "config_hash": self.config_hash,
            "points": self.summary(),
            "rows": self.rows,
        });
        fs::write(path, serde_json::to_vec_pretty(&body)?)?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> crate::Error {
    crate::Error::Format(format!("report csv: {e}"))
}
