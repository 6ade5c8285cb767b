//! Output directory bookkeeping and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Record of one command invocation. The manifest does not list itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_sha256: String,
    pub artifacts: Vec<Artifact>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub struct OutputDir {
    root: PathBuf,
    command: String,
    config_sha256: String,
    started: u128,
    artifacts: Vec<Artifact>,
}

impl OutputDir {
    pub fn create(root: &Path, command: &str, config_json: &[u8]) -> Result<Self> {
        fs::create_dir_all(root).map_err(io(root))?;
        Ok(Self {
            root: root.to_path_buf(),
            command: command.into(),
            config_sha256: sha256_hex(config_json),
            started: now_ms(),
            artifacts: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(io(&path))?;
        self.artifacts.retain(|a| a.path != name);
        self.artifacts.push(Artifact {
            path: name.into(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_vec_pretty(value).map_err(|source| CliError::Json {
            path: self.path(name).display().to_string(),
            source,
        })?;
        text.push(b'\n');
        self.write(name, &text)
    }

    /// Renders with `fill` into memory, then writes.
    pub fn write_with(&mut self, name: &str, fill: impl FnOnce(&mut Vec<u8>) -> sls_core::Result<()>) -> Result<PathBuf> {
        let mut buf = Vec::new();
        fill(&mut buf)?;
        self.write(name, &buf)
    }

    pub fn artifacts(&self) -> &[Artifact] {
        &self.artifacts
    }

    pub fn finish(self) -> Result<RunManifest> {
        let manifest = RunManifest {
            tool: "sls-robust".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command,
            config_sha256: self.config_sha256,
            artifacts: self.artifacts,
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
        };
        let path = self.root.join(MANIFEST);
        let mut text = serde_json::to_vec_pretty(&manifest).map_err(|source| CliError::Json {
            path: path.display().to_string(),
            source,
        })?;
        text.push(b'\n');
        fs::write(&path, text).map_err(io(&path))?;
        Ok(manifest)
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.display().to_string(),
        source,
    })
}
