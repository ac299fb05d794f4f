//! Append-only JSON-lines log of trained models and verification instances.

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::verify::Verdict;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub seed: u64,
    pub ratio: f64,
    pub accuracy: f64,
    pub epochs: usize,
    pub reached_threshold: bool,
    /// Model file, relative to the results directory.
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub seed: u64,
    pub ratio: f64,
    pub epsilon: f64,
    pub input: usize,
    pub label: usize,
    pub verdict: Verdict,
    pub bound: Option<f64>,
    pub wall_time_s: f64,
    pub subdomains: usize,
    pub model_accuracy: f64,
}

/// `(seed, ratio bits, epsilon bits, input)`.
pub type InstanceKey = (u64, u64, u64, usize);

impl ResultRecord {
    pub fn key(&self) -> InstanceKey {
        (self.seed, self.ratio.to_bits(), self.epsilon.to_bits(), self.input)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogEntry {
    Model(ModelRecord),
    Instance(ResultRecord),
}

impl LogEntry {
    pub fn parse_line(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line)?)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultLog {
    pub models: Vec<ModelRecord>,
    pub instances: Vec<ResultRecord>,
}

impl ResultLog {
    /// Parses a whole log. A final line without its newline is a write cut
    /// short and is ignored; any other bad line is an error.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut log = Self::default();
        let complete = text.ends_with('\n');
        let lines: Vec<&str> = text.lines().collect();
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match LogEntry::parse_line(line) {
                Ok(entry) => log.push(entry),
                Err(_) if i + 1 == lines.len() && !complete => {}
                Err(e) => return Err(Error::format(path, format!("line {}: {e}", i + 1))),
            }
        }
        Ok(log)
    }

    pub fn push(&mut self, entry: LogEntry) {
        match entry {
            LogEntry::Model(m) => self.models.push(m),
            LogEntry::Instance(r) => self.instances.push(r),
        }
    }

    pub fn model(&self, seed: u64, ratio: f64) -> Option<&ModelRecord> {
        self.models
            .iter()
            .find(|m| m.seed == seed && m.ratio.to_bits() == ratio.to_bits())
    }

    pub fn completed(&self) -> BTreeSet<InstanceKey> {
        self.instances.iter().map(ResultRecord::key).collect()
    }
}

/// Single writer over the log file.
pub struct LogWriter {
    path: PathBuf,
    file: std::fs::File,
}

impl LogWriter {
    /// Opens for appending, first dropping a torn final line if present.
    pub fn open(path: &Path) -> Result<Self> {
        if let Ok(text) = std::fs::read_to_string(path) {
            if !text.is_empty() && !text.ends_with('\n') {
                let keep = text.rfind('\n').map_or(0, |i| i + 1);
                std::fs::write(path, &text[..keep]).map_err(|e| Error::io(path, e))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, entry: &LogEntry) -> Result<()> {
        let mut line = serde_json::to_string(entry)?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.sync_data())
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_log(path: &Path) -> Result<ResultLog> {
    match std::fs::read_to_string(path) {
        Ok(text) => ResultLog::parse(&text, path),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(ResultLog::default()),
        Err(e) => Err(Error::io(path, e)),
    }
}
