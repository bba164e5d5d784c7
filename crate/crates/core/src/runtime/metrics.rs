//! JSON-lines metrics sink.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::downstream::MetricsReport;
use crate::error::{Error, Result};

/// Metric names that are fractions and must lie in `[0, 1]`.
fn is_rate(key: &str) -> bool {
    ["acc", "recall", "retrieval"].iter().any(|p| key.contains(p))
}

pub fn validate_report(r: &MetricsReport) -> Result<()> {
    for (k, &v) in &r.values {
        if !v.is_finite() {
            return Err(Error::NonFiniteMetric { key: k.clone(), value: v });
        }
        if is_rate(k) && !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("metric {k} = {v} outside [0, 1]")));
        }
    }
    Ok(())
}

/// Appends one JSON object per record. Each record is serialized in full
/// before the lock is taken and written with a single call, then flushed,
/// so concurrent writers never interleave partial lines.
pub struct MetricsSink {
    path: PathBuf,
    file: Mutex<File>,
}

impl MetricsSink {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn log(&self, record: &MetricsReport) -> Result<()> {
        validate_report(record)?;
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        let mut f = self.file.lock().unwrap_or_else(|e| e.into_inner());
        f.write_all(&line)?;
        f.flush()?;
        Ok(())
    }
}

/// Parses every line of a metrics log.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsReport>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
