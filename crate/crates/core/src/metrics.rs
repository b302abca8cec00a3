//! Append-only metrics log, one JSON record per line.
//!
//! Field order is fixed: `run_id, step, split, metric, id, severity, value`.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    CleanError,
    CorruptionError,
    RobustError,
    SubnetMeanAcc,
    WallclockS,
    Mce,
    LossTotal,
    LossCe,
    LossKl,
    ControllerMeanAcc,
}

impl Metric {
    /// Metrics expressed as a percentage in `[0, 100]`.
    pub fn is_error(self) -> bool {
        matches!(self, Metric::CleanError | Metric::CorruptionError | Metric::RobustError)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub step: u64,
    pub split: String,
    pub metric: Metric,
    /// Corruption kind or attack id.
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub severity: Option<u8>,
    pub value: f64,
}

impl MetricsRecord {
    pub fn new(run_id: &str, step: u64, split: &str, metric: Metric, value: f64) -> Self {
        Self {
            run_id: run_id.to_string(),
            step,
            split: split.to_string(),
            metric,
            id: None,
            severity: None,
            value,
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = Some(id.into());
        self
    }

    pub fn with_severity(mut self, severity: u8) -> Self {
        self.severity = Some(severity);
        self
    }

    pub fn check(&self) -> Result<()> {
        if !self.value.is_finite() {
            return Err(Error::Other(format!("{:?} value {} is not finite", self.metric, self.value)));
        }
        if self.metric.is_error() && !(0.0..=100.0).contains(&self.value) {
            return Err(Error::Other(format!("{:?} value {} outside [0, 100]", self.metric, self.value)));
        }
        Ok(())
    }
}

/// Records kept in memory and, when backed by a file, appended to it.
#[derive(Debug, Default)]
pub struct MetricsLog {
    path: Option<PathBuf>,
    records: Vec<MetricsRecord>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (creating if needed) a log file, loading the existing records.
    pub fn open(path: &Path) -> Result<Self> {
        let records = if path.exists() { read_log(path)? } else { Vec::new() };
        Ok(Self {
            path: Some(path.to_path_buf()),
            records,
        })
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn push(&mut self, record: MetricsRecord) -> Result<()> {
        record.check()?;
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            let line = serde_json::to_string(&record)?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        self.records.push(record);
        Ok(())
    }

    /// Drops records past `step` (e.g. written after the checkpoint a run
    /// resumes from) and rewrites the file.
    pub fn truncate_after(&mut self, step: u64) -> Result<()> {
        self.records.retain(|r| r.step <= step);
        if let Some(path) = &self.path {
            let mut text = String::new();
            for r in &self.records {
                text.push_str(&serde_json::to_string(r)?);
                text.push('\n');
            }
            fs::write(path, text).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

pub fn read_log(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: MetricsRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Other(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(record);
    }
    Ok(out)
}
