//! Run manifests: every artifact-producing command records its command
//! name, effective configuration, seed, tool version, output paths, and
//! creation time next to the artifacts, so a run can be reproduced from
//! the manifest alone.

use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

/// Reproducibility record written as `manifest.json` alongside outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub version: String,
    pub outputs: Vec<String>,
    pub created_utc: String,
}

impl RunManifest {
    /// Stamps the current tool version and UTC time.
    pub fn new(
        command: &str,
        config: serde_json::Value,
        seed: u64,
        outputs: Vec<String>,
    ) -> Self {
        Self {
            command: command.to_string(),
            config,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            outputs,
            created_utc: Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true),
        }
    }

    /// Writes `dir/manifest.json` and returns its path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, ManifestError> {
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, json)
            .map_err(|source| ManifestError::Io { path: path.display().to_string(), source })?;
        Ok(path)
    }

    /// Reads a manifest back.
    pub fn read(path: &Path) -> Result<Self, ManifestError> {
        let bytes = std::fs::read(path)
            .map_err(|source| ManifestError::Io { path: path.display().to_string(), source })?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = RunManifest::new(
            "gen-data",
            json!({"types": 10, "seed": 7}),
            7,
            vec!["train.jsonl".into(), "dev.jsonl".into()],
        );
        let path = manifest.write(dir.path()).unwrap();
        assert_eq!(path.file_name().unwrap(), "manifest.json");
        let back = RunManifest::read(&path).unwrap();
        assert_eq!(back, manifest);
    }

    #[test]
    fn stamps_version_and_parseable_timestamp() {
        let manifest = RunManifest::new("train", json!({}), 0, vec![]);
        assert_eq!(manifest.version, env!("CARGO_PKG_VERSION"));
        assert!(
            chrono::DateTime::parse_from_rfc3339(&manifest.created_utc).is_ok(),
            "bad timestamp {}",
            manifest.created_utc
        );
    }
}
