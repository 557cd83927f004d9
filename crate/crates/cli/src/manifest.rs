//! The run manifest written into every output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use noisefuse::training::TrainConfig;
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Where each configuration layer came from, lowest precedence first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSources {
    pub preset: String,
    pub file: Option<PathBuf>,
    /// `--set` values followed by dedicated flags; later entries win.
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: TrainConfig,
    pub config_sources: ConfigSources,
    pub seed: u64,
    pub inputs: BTreeMap<String, PathBuf>,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub status: RunStatus,
    pub revision: String,
    #[serde(skip)]
    path: PathBuf,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    /// Creates the output directory and the manifest; call [`write`](Self::write) once the
    /// planned artifacts are listed.
    pub fn begin(command: &str, argv: Vec<String>, cfg: &TrainConfig, sources: ConfigSources, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            command: command.into(),
            argv,
            config: cfg.clone(),
            config_sources: sources,
            seed: cfg.seed,
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            started_unix: now(),
            finished_unix: None,
            status: RunStatus::Running,
            revision: format!("{} {}", env!("CARGO_PKG_VERSION"), env!("NOISEFUSE_REVISION")),
            path: dir.join(MANIFEST_FILE),
        })
    }

    pub fn write(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&self.path, text).with_context(|| format!("writing {}", self.path.display()))
    }

    pub fn finish(mut self) -> Result<()> {
        self.status = RunStatus::Completed;
        self.finished_unix = Some(now());
        self.write()
    }
}

impl Drop for RunManifest {
    /// A manifest dropped while still running belongs to a failed stage.
    fn drop(&mut self) {
        if self.status == RunStatus::Running && self.path.exists() {
            self.status = RunStatus::Failed;
            self.finished_unix = Some(now());
            let _ = self.write();
        }
    }
}
