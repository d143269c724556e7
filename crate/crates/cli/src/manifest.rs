use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use qmaxvit::{Error, Result};
use serde::{Deserialize, Serialize};

pub const VERSION: &str = match option_env!("QMX_GIT_DESCRIBE") {
    Some(v) => v,
    None => env!("CARGO_PKG_VERSION"),
};

pub const FILE_NAME: &str = "manifest.json";

/// Provenance record written once into every output directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub config: serde_json::Value,
    /// Files written by the command, relative to the output directory.
    pub outputs: Vec<PathBuf>,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunManifest {
    pub fn start(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            command: command.into(),
            version: VERSION.into(),
            seed,
            started_unix: now(),
            finished_unix: f64::NAN,
            config,
            outputs: Vec::new(),
        }
    }

    pub fn add(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    pub fn finish(mut self, dir: &Path) -> Result<()> {
        self.finished_unix = now();
        self.outputs.sort();
        let path = dir.join(FILE_NAME);
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}
