//! Run manifests written next to every command's outputs.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::AppResult;
use crate::io::write_json;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    /// `ok`, `gate_breach` or `failed`.
    pub status: String,
    pub message: Option<String>,
    pub config_path: Option<String>,
    pub config_sha256: Option<String>,
    pub seed: u64,
    pub threads: usize,
    pub versions: BTreeMap<String, String>,
    pub started_unix_seconds: u64,
    pub wall_clock_seconds: f64,
    /// File names relative to the output directory.
    pub outputs: Vec<String>,
    pub details: serde_json::Value,
}

/// Collects manifest fields while a command runs.
pub struct ManifestBuilder {
    manifest: Manifest,
    clock: Instant,
}

impl ManifestBuilder {
    pub fn start(command: &str, seed: u64, threads: usize) -> Self {
        let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let versions = BTreeMap::from([
            ("runmax".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("runmax-core".to_string(), runmax_core::VERSION.to_string()),
        ]);
        ManifestBuilder {
            manifest: Manifest {
                command: command.into(),
                status: "ok".into(),
                message: None,
                config_path: None,
                config_sha256: None,
                seed,
                threads,
                versions,
                started_unix_seconds: started,
                wall_clock_seconds: 0.0,
                outputs: Vec::new(),
                details: serde_json::Value::Null,
            },
            clock: Instant::now(),
        }
    }

    pub fn config(&mut self, path: &Path, sha256: &str) {
        self.manifest.config_path = Some(path.display().to_string());
        self.manifest.config_sha256 = Some(sha256.to_string());
    }

    pub fn output(&mut self, name: &str) {
        self.manifest.outputs.push(name.to_string());
    }

    pub fn details(&mut self, details: serde_json::Value) {
        self.manifest.details = details;
    }

    pub fn status(&mut self, status: &str, message: Option<String>) {
        self.manifest.status = status.into();
        self.manifest.message = message;
    }

    pub fn finish(mut self, dir: &Path) -> AppResult<Manifest> {
        self.manifest.wall_clock_seconds = self.clock.elapsed().as_secs_f64();
        write_json(&dir.join("manifest.json"), &self.manifest)?;
        Ok(self.manifest)
    }
}
