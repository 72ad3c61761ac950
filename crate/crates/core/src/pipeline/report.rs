//! Evaluation, comparison and ablation reports (JSON + CSV).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};

/// Population statistics of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    /// `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Summary {
            mean,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub batch: usize,
    pub mse: f64,
    /// `None` when the quantized output is exact (zero error power).
    pub sqnr_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub batches: Vec<BatchMetrics>,
    pub mse: Summary,
    pub sqnr_db: Option<Summary>,
    pub fp_size_bytes: usize,
    pub quantized_size_bytes: usize,
    pub size_ratio: f64,
    pub provenance: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn mean_sqnr_db(&self) -> Option<f64> {
        self.sqnr_db.map(|s| s.mean)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("batch,mse,sqnr_db\n");
        for b in &self.batches {
            let q = b.sqnr_db.map(|v| format!("{v:e}")).unwrap_or_else(|| "inf".into());
            let _ = writeln!(s, "{},{:e},{}", b.batch, b.mse, q);
        }
        s
    }
}

/// Per-calibration-batch agreement for the two calibration arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    /// Name of the per-batch agreement metric.
    pub metric: String,
    pub ptq: Vec<f64>,
    pub zsq: Vec<f64>,
    pub ptq_summary: Summary,
    pub zsq_summary: Summary,
    /// `|mean_zsq - mean_ptq| / |mean_ptq|`.
    pub relative_mean_difference: f64,
    pub provenance: BTreeMap<String, String>,
}

impl CompareReport {
    pub fn new(metric: &str, ptq: Vec<f64>, zsq: Vec<f64>, provenance: BTreeMap<String, String>) -> Result<Self> {
        let (Some(p), Some(z)) = (Summary::of(&ptq), Summary::of(&zsq)) else {
            return Err(Error::Empty("comparison needs batches in both arms".into()));
        };
        Ok(CompareReport {
            metric: metric.into(),
            relative_mean_difference: (z.mean - p.mean).abs() / p.mean.abs(),
            ptq_summary: p,
            zsq_summary: z,
            ptq,
            zsq,
            provenance,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("arm,batch,{}\n", self.metric);
        for (arm, values) in [("ptq", &self.ptq), ("zsq", &self.zsq)] {
            for (i, v) in values.iter().enumerate() {
                let _ = writeln!(s, "{arm},{i},{v:e}");
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `mean`, `mean-std` or `gaussian`.
    pub label: String,
    pub iterations: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub eval_mse: f64,
    pub eval_sqnr_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub provenance: BTreeMap<String, String>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,iterations,initial_loss,final_loss,eval_mse,eval_sqnr_db\n");
        for r in &self.rows {
            let q = r.eval_sqnr_db.map(|v| format!("{v:e}")).unwrap_or_else(|| "inf".into());
            let _ = writeln!(
                s,
                "{},{},{:e},{:e},{:e},{}",
                r.label, r.iterations, r.initial_loss, r.final_loss, r.eval_mse, q
            );
        }
        s
    }
}

/// Writes `<stem>.json` and `<stem>.csv` next to each other.
pub fn write_report<R: Serialize>(report: &R, csv: &str, stem: impl AsRef<Path>) -> Result<()> {
    let stem = stem.as_ref();
    let mut json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Manifest(format!("cannot serialize report: {e}")))?;
    json.push('\n');
    container::write_atomic(&stem.with_extension("json"), json.as_bytes())?;
    container::write_atomic(&stem.with_extension("csv"), csv.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_values() {
        let s = Summary::of(&[1.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.std, s.min, s.max), (2.0, 1.0, 1.0, 3.0));
        assert!(Summary::of(&[]).is_none());
    }

    #[test]
    fn compare_relative_difference() {
        let r = CompareReport::new("m", vec![10.0, 10.0], vec![11.0, 11.0], BTreeMap::new()).unwrap();
        assert!((r.relative_mean_difference - 0.1).abs() < 1e-12);
        assert_eq!(r.to_csv().lines().count(), 5);
    }
}
