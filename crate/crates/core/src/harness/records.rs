use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TELEMETRY_FILE: &str = "telemetry.jsonl";
pub const VALIDATION_FILE: &str = "validation.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Validation pass on the held-out split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: u64,
    pub bleu: f64,
    pub exact_match: f64,
}

/// Appends one JSON object per line.
pub struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlWriter {
    /// Opens `path`, truncating unless `append` is set.
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Keeps only records with `step <= last`, used before appending to a resumed run.
pub fn truncate_after<T>(path: &Path, last: u64, step_of: impl Fn(&T) -> u64) -> Result<()>
where
    T: DeserializeOwned,
{
    if !path.exists() {
        return Ok(());
    }
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for line in raw.lines().filter(|l| !l.trim().is_empty()) {
        let record: T = serde_json::from_str(line)?;
        if step_of(&record) <= last {
            text.push_str(line);
            text.push('\n');
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
