//! Per-run manifest: what was run, with which configuration, and where the
//! outputs went.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::CliError;

pub const MANIFEST_FILE: &str = "experiment.json";

/// Output locations, relative to the run directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub metrics_log: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub tables: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub command: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub artifacts: Artifacts,
    /// `completed`, `diverged` or `failed`.
    pub status: String,
    pub steps_completed: Option<u64>,
    pub started_unix_s: u64,
    pub finished_unix_s: u64,
    pub wall_clock_s: f64,
}

/// Git-style blob hash of the canonical configuration.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let body = config.canonical();
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", body.len()).as_bytes());
    h.update(body.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl ExperimentManifest {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        let now = unix_now();
        Self {
            command: command.into(),
            config: config.clone(),
            config_hash: config_hash(config),
            artifacts: Artifacts::default(),
            status: "running".into(),
            steps_completed: None,
            started_unix_s: now,
            finished_unix_s: now,
            wall_clock_s: 0.0,
        }
    }

    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join(MANIFEST_FILE)
    }

    pub fn read(run_dir: &Path) -> Result<Option<Self>, CliError> {
        let path = Self::path(run_dir);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| CliError::Io(format!("cannot read `{}`: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| CliError::Io(format!("corrupt run manifest `{}`: {e}", path.display())))
    }

    pub fn write(&self, run_dir: &Path) -> Result<(), CliError> {
        let path = Self::path(run_dir);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::Io(format!("cannot write `{}`: {e}", path.display())))
    }
}
