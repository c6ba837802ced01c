//! Result bundles: every file written through [`Bundle`] is checksummed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{RunError, RunResult};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Path relative to the bundle directory, with '/' separators.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes rows to CSV text with a header row.
pub fn csv_bytes<R: Serialize>(rows: &[R]) -> RunResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| RunError::io("<csv buffer>", e.into_error()))
}

/// One row of the plot-data subformat emitted alongside every fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub series: String,
    pub x: f64,
    pub y: f64,
    pub y_err: Option<f64>,
}

#[derive(Debug)]
pub struct Bundle {
    dir: PathBuf,
    files: Vec<OutputFile>,
}

impl Bundle {
    pub fn create(dir: &Path) -> RunResult<Self> {
        fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn files(&self) -> &[OutputFile] {
        &self.files
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> RunResult<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| RunError::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| RunError::io(&path, e))?;
        self.record(name, bytes);
        Ok(path)
    }

    /// Registers a file already on disk under `name`.
    pub fn record(&mut self, name: &str, bytes: &[u8]) {
        let entry = OutputFile { path: name.replace('\\', "/"), sha256: sha256_hex(bytes), bytes: bytes.len() as u64 };
        match self.files.iter_mut().find(|f| f.path == entry.path) {
            Some(f) => *f = entry,
            None => self.files.push(entry),
        }
    }

    pub fn write_csv<R: Serialize>(&mut self, name: &str, rows: &[R]) -> RunResult<PathBuf> {
        let bytes = csv_bytes(rows)?;
        self.write_bytes(name, &bytes)
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> RunResult<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write_bytes(name, &bytes)
    }

    pub fn write_plot(&mut self, name: &str, rows: &[PlotRow]) -> RunResult<PathBuf> {
        self.write_csv(name, rows)
    }
}

/// JSON numbers cannot hold ±∞ or NaN; such values are written as null.
pub fn finite_or_none(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}
