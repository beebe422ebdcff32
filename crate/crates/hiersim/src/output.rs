//! Output files and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::RunError;

pub const MANIFEST: &str = "manifest.json";

/// A CSV table with a mandatory header.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&'static str]) -> Self {
        Self {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }
}

/// Shortest round-trip decimal form; non-finite values as `nan`, `inf`, `-inf`.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{x:?}")
    }
}

pub fn int(x: impl Into<u64>) -> String {
    x.into().to_string()
}

/// JSON text with a trailing newline.
pub fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("report serializes to JSON");
    v.push(b'\n');
    v
}

/// Named files produced by a run, in the order they are written.
#[derive(Debug, Default)]
pub struct Artifacts {
    pub files: Vec<(String, Vec<u8>)>,
}

impl Artifacts {
    pub fn csv(&mut self, name: &str, table: &CsvTable) {
        self.files.push((name.into(), table.to_bytes()));
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) {
        self.files.push((name.into(), json_bytes(value)));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Complete,
    /// The compute budget stopped the run; only a prefix of the replicas ran.
    BudgetExceeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub replicas_requested: usize,
    pub replicas_completed: usize,
    pub jobs: usize,
    pub status: RunStatus,
    pub wall_time_seconds: f64,
    pub files: Vec<FileEntry>,
    /// Per-module truncation, clipping and budget diagnostics.
    pub diagnostics: serde_json::Value,
    pub config: serde_json::Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes the artifacts into `dir` and returns their manifest entries.
pub fn write_artifacts(dir: &Path, artifacts: &Artifacts) -> Result<Vec<FileEntry>, RunError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(artifacts.files.len());
    for (name, bytes) in &artifacts.files {
        let path: PathBuf = dir.join(name);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        entries.push(FileEntry {
            path: name.clone(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
    }
    Ok(entries)
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<(), RunError> {
    let path = dir.join(MANIFEST);
    fs::write(&path, json_bytes(manifest)).map_err(io_err(&path))
}
