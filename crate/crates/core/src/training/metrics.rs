use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::hex;

/// Version tag of the per-epoch CSV layout.
pub const METRICS_SCHEMA: &str = "mixforge.metrics.v1";

pub const METRICS_HEADER: [&str; 7] = ["epoch", "train_loss", "lr", "top1_pct", "top5_pct", "seconds", "tau"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
    pub top1_pct: Option<f64>,
    pub top5_pct: Option<f64>,
    pub seconds: f64,
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub epochs: Vec<EpochMetrics>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl RunMetrics {
    pub fn push(&mut self, row: EpochMetrics) -> Result<()> {
        if let (Some(t1), Some(t5)) = (row.top1_pct, row.top5_pct) {
            if t5 < t1 {
                return Err(Error::Consistency(format!(
                    "top-5 {t5} below top-1 {t1} at epoch {}",
                    row.epoch
                )));
            }
        }
        self.epochs.push(row);
        Ok(())
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }

    pub fn final_tau(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.tau)
    }

    /// One header row plus one row per epoch.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(METRICS_HEADER)?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                format!("{}", e.train_loss),
                format!("{}", e.lr),
                opt(e.top1_pct),
                opt(e.top5_pct),
                format!("{:.3}", e.seconds),
                opt(e.tau),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// SHA-256 over every field except wall-clock time.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.epochs {
            h.update(format!(
                "{},{},{},{},{},{}\n",
                e.epoch,
                e.train_loss,
                e.lr,
                opt(e.top1_pct),
                opt(e.top5_pct),
                opt(e.tau)
            ));
        }
        hex(&h.finalize())
    }

    pub fn summary(&self) -> serde_json::Value {
        let last = self.epochs.last();
        serde_json::json!({
            "schema": METRICS_SCHEMA,
            "epochs": self.epochs.len(),
            "final_train_loss": last.map(|e| e.train_loss),
            "final_top1_pct": last.and_then(|e| e.top1_pct),
            "final_top5_pct": last.and_then(|e| e.top5_pct),
            "final_tau": self.final_tau(),
            "total_seconds": self.epochs.iter().map(|e| e.seconds).sum::<f64>(),
            "metrics_digest": self.digest(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize, seconds: f64) -> EpochMetrics {
        EpochMetrics {
            epoch,
            train_loss: 0.5,
            lr: 0.1,
            top1_pct: Some(40.0),
            top5_pct: Some(90.0),
            seconds,
            tau: None,
        }
    }

    #[test]
    fn csv_has_header_and_one_row_per_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut m = RunMetrics::default();
        m.push(row(1, 1.0)).unwrap();
        m.push(row(2, 1.0)).unwrap();
        m.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], METRICS_HEADER.join(","));
    }

    #[test]
    fn digest_ignores_wall_clock() {
        let mut a = RunMetrics::default();
        a.push(row(1, 1.0)).unwrap();
        let mut b = RunMetrics::default();
        b.push(row(1, 7.5)).unwrap();
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn top5_below_top1_is_rejected() {
        let mut m = RunMetrics::default();
        let mut r = row(1, 0.0);
        r.top5_pct = Some(10.0);
        assert!(m.push(r).is_err());
    }
}
