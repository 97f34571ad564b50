//! Provenance attached to every file the tools write.
//!
//! The metadata is deterministic: re-running with the same tool version, seed
//! and configuration hash reproduces the artifact byte for byte. Creation
//! times only go to a `<file>.meta.json` sidecar.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TOOL: &str = "gafl";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub tool: String,
    pub tool_version: String,
    pub seed: u64,
    pub config_hash: String,
}

impl ArtifactMeta {
    pub fn new(seed: u64, config_hash: impl Into<String>) -> Self {
        Self { tool: TOOL.into(), tool_version: TOOL_VERSION.into(), seed, config_hash: config_hash.into() }
    }

    /// Metadata for `config`, hashed through its JSON form.
    pub fn for_config<T: Serialize>(seed: u64, config: &T) -> Self {
        Self::new(seed, config_hash(config))
    }
}

/// Hex SHA-256 of the JSON serialization of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("configuration serializes to JSON");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sidecar {
    pub artifact: String,
    #[serde(flatten)]
    pub meta: ArtifactMeta,
    pub created_unix: u64,
}

pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    artifact.with_file_name(name)
}

/// Writes the timestamped sidecar next to `artifact`.
pub fn write_sidecar(artifact: &Path, meta: &ArtifactMeta) -> Result<PathBuf> {
    let created_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let sidecar = Sidecar {
        artifact: artifact.file_name().unwrap_or_default().to_string_lossy().into_owned(),
        meta: meta.clone(),
        created_unix,
    };
    let path = sidecar_path(artifact);
    let mut text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
