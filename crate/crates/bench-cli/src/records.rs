//! Line-delimited record stream shared by `bench-io`, `train`, and `report`.

use std::io::{BufRead, Write};
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use oocgnn::metrics::RunRecord;

/// Raw IO benchmark result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IoBenchRecord {
    pub mode: String,
    pub shards: usize,
    pub workers: usize,
    pub commands_per_worker: usize,
    pub dim: usize,
    pub latency_us: u64,
    pub parallelism: usize,
    pub seed: u64,
    pub measured_secs: f64,
    pub commands: u64,
    pub cmds_per_sec: f64,
    pub bytes_per_sec: f64,
    pub theoretical_max_cmds_per_sec: f64,
    pub pct_of_max: f64,
}

/// One line of the metrics stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum Record {
    Train(Box<RunRecord>),
    BenchIo(IoBenchRecord),
}

impl Record {
    /// Short human label for a train record's ablation mode.
    pub fn mode_label(cfg: &oocgnn::EngineConfig) -> String {
        format!(
            "{}+{}+{}",
            if cfg.pipeline_enabled && cfg.pipeline_depth > 1 { "pipe" } else { "nopipe" },
            if cfg.cache_enabled { "cache" } else { "nocache" },
            if cfg.sync_io { "syncio" } else { "asyncio" },
        )
    }
}

/// Appends records to a JSONL file, creating it if needed.
pub fn append_records(path: &Path, records: &[Record]) -> anyhow::Result<()> {
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    for r in records {
        serde_json::to_writer(&mut file, r)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a record stream, skipping malformed lines with a warning.
pub fn read_records(path: &Path) -> anyhow::Result<Vec<Record>> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut records = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Record>(&line) {
            Ok(r) => records.push(r),
            Err(e) => eprintln!("warning: skipping malformed record on line {}: {e}", i + 1),
        }
    }
    Ok(records)
}
