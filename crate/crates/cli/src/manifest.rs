use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use jumpsae::TrainConfig;
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

/// What a command read, how it was configured and what it wrote.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub artifacts: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub parameters: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: None,
            seed: None,
            inputs: Vec::new(),
            artifacts: Vec::new(),
            parameters: serde_json::Value::Null,
        }
    }

    pub fn input(&mut self, p: impl Into<PathBuf>) {
        self.inputs.push(p.into());
    }

    pub fn artifact(&mut self, p: impl Into<PathBuf>) {
        self.artifacts.push(p.into());
    }

    /// Write `manifest.json` into `dir` after checking every artifact exists.
    pub fn write(mut self, dir: &Path) -> Result<PathBuf> {
        for a in &self.artifacts {
            anyhow::ensure!(a.exists(), "artifact {} was not written", a.display());
        }
        let path = dir.join(MANIFEST_FILE);
        self.artifacts.push(path.clone());
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
