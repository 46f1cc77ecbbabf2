use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use hgad_core::{sha256_hex, Error, Result};
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Record of one command invocation, written as `manifest.json` next to its
/// outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub engine_version: &'static str,
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub config_hash: Option<String>,
    pub precision: Option<String>,
    pub deterministic: bool,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub artifacts: Vec<Artifact>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn start(command: &str, argv: &[String], seed: u64, deterministic: bool) -> Self {
        Self {
            engine_version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            argv: argv.to_vec(),
            seed,
            config_hash: None,
            precision: None,
            deterministic,
            started_unix: now(),
            finished_unix: 0,
            artifacts: Vec::new(),
        }
    }

    /// Writes `bytes` to `dir/name` and records it.
    pub fn write(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.artifacts.push(Artifact {
            path: name.to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    pub fn finish(mut self, dir: &Path) -> Result<()> {
        self.finished_unix = now();
        let json = serde_json::to_string_pretty(&self).expect("manifest serializes");
        let path = dir.join("manifest.json");
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}
