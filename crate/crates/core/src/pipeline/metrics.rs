use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{Branch, LossBreakdown};
use crate::pipeline::Stage;

/// One optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    /// Zero-based index of the epoch this step belongs to.
    pub epoch: u32,
    pub stage: Stage,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    /// Autoregressive loss of an APC-branch step, zero otherwise.
    pub l_apc: f64,
    /// Base learning rate from the warmup schedule.
    pub lr: f64,
    pub branch: Option<Branch>,
    /// Effective learning rate of every parameter group.
    pub group_lr: BTreeMap<String, f64>,
    pub wall_ms: u64,
}

impl MetricsRecord {
    /// The record without its timing field, for run-to-run comparisons.
    pub fn without_timing(&self) -> MetricsRecord {
        MetricsRecord {
            wall_ms: 0,
            ..self.clone()
        }
    }
}

/// Appends JSON lines to a metrics file.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(MetricsWriter {
            out: BufWriter::new(file),
            path,
        })
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, rec).map_err(|e| Error::Invalid(e.to_string()))?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            what: format!("line {}: {e}", i + 1),
        })?;
        out.push(rec);
    }
    Ok(out)
}
