use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One scalar measurement. Files hold records ordered by step within each
/// `(split, metric)` pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl MetricsRecord {
    pub fn new(step: usize, split: &str, metric: &str, value: f64) -> Self {
        MetricsRecord {
            step,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
        }
    }
}

/// Values of one `(split, metric)` series in record order.
pub fn series(records: &[MetricsRecord], split: &str, metric: &str) -> Vec<(usize, f64)> {
    records
        .iter()
        .filter(|r| r.split == split && r.metric == metric)
        .map(|r| (r.step, r.value))
        .collect()
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in records {
        w.serialize(r)
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let headers = r
        .headers()
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?
        .clone();
    for col in ["step", "split", "metric", "value"] {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::invalid(format!("{}: missing column `{col}`", path.display())));
        }
    }
    r.deserialize()
        .map(|rec| rec.map_err(|e| Error::invalid(format!("{}: {e}", path.display()))))
        .collect()
}

/// Appends records as CSV text (used for streaming progress to a writer).
pub fn write_metrics<W: Write>(out: W, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r).map_err(|e| Error::invalid(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::invalid(e.to_string()))
}
