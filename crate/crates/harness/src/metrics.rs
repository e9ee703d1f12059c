//! JSONL loss streams, one object per epoch, flushed as written.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use asdfd_core::distill::LossRecord;
use serde::{Deserialize, Serialize};

use crate::audit;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub l_input: Option<f64>,
    pub l_mask: Option<f64>,
    pub l_kl: f64,
    pub l_pt: f64,
    pub l_kd: f64,
    pub acc: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
}

impl MetricRecord {
    pub fn new(r: &LossRecord, seed: u64, config_hash: &str) -> Self {
        Self {
            epoch: r.epoch,
            l_input: r.l_input,
            l_mask: r.l_mask,
            l_kl: r.l_kl,
            l_pt: r.l_pt,
            l_kd: r.l_kd,
            acc: r.acc,
            seed,
            config_hash: config_hash.to_string(),
        }
    }
}

pub struct MetricsWriter {
    file: File,
    seed: u64,
    config_hash: String,
}

impl MetricsWriter {
    /// Starts a new stream at `path`; an existing file is replaced.
    pub fn create(path: &Path, seed: u64, config_hash: &str) -> std::io::Result<Self> {
        Ok(Self { file: audit::create(path)?, seed, config_hash: config_hash.to_string() })
    }

    pub fn write(&mut self, record: &LossRecord) -> std::io::Result<()> {
        self.write_record(&MetricRecord::new(record, self.seed, &self.config_hash))
    }

    pub fn write_record(&mut self, record: &MetricRecord) -> std::io::Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()
    }
}

pub fn write_metrics(path: &Path, records: &[LossRecord], seed: u64, config_hash: &str) -> std::io::Result<()> {
    let mut w = MetricsWriter::create(path, seed, config_hash)?;
    records.iter().try_for_each(|r| w.write(r))
}

pub fn read_metrics(path: &Path) -> anyhow::Result<Vec<MetricRecord>> {
    let reader = BufReader::new(audit::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| anyhow::anyhow!("{}:{}: {e}", path.display(), i + 1))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_stream_creates_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        write_metrics(&p, &[], 1, "abc").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"");
        assert!(read_metrics(&p).unwrap().is_empty());
    }

    #[test]
    fn null_acc_and_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let r = LossRecord { epoch: 1, l_input: None, l_mask: Some(0.5), l_kl: 0.1, l_pt: 0.2, l_kd: 50.1, acc: None };
        write_metrics(&p, &[r], 3, "h").unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(v["acc"], serde_json::Value::Null);
        assert_eq!(v["l_input"], serde_json::Value::Null);
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort();
        assert_eq!(keys, ["acc", "config_hash", "epoch", "l_input", "l_kd", "l_kl", "l_mask", "l_pt", "seed"]);
    }
}
