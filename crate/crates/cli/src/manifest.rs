use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA: u32 = 1;

/// Record of one invocation, written next to its outputs.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub subcommand: String,
    /// Every setting the run used, defaults included.
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: Vec<String>,
    pub started_unix_secs: u64,
    /// Stage name to wall-clock milliseconds.
    pub timings_ms: BTreeMap<String, f64>,
}

pub struct Recorder {
    manifest: RunManifest,
    stage: Instant,
}

impl Recorder {
    pub fn new(subcommand: &str, config: impl Serialize, seed: u64) -> Result<Self> {
        let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Ok(Self {
            manifest: RunManifest {
                schema_version: MANIFEST_SCHEMA,
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                subcommand: subcommand.to_string(),
                config: serde_json::to_value(config)?,
                seed,
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
                started_unix_secs: started,
                timings_ms: BTreeMap::new(),
            },
            stage: Instant::now(),
        })
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.manifest.inputs.insert(name.to_string(), path.to_path_buf());
    }

    pub fn output(&mut self, name: impl Into<String>) {
        self.manifest.outputs.push(name.into());
    }

    /// Closes the current stage under `name` and starts the next one.
    pub fn lap(&mut self, name: &str) {
        let ms = self.stage.elapsed().as_secs_f64() * 1e3;
        self.manifest.timings_ms.insert(name.to_string(), ms);
        self.stage = Instant::now();
    }

    pub fn write(self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&self.manifest)?)
            .with_context(|| format!("writing {}", path.display()))
    }
}
