//! Per-stage manifests: content hashes of inputs and outputs plus the
//! effective configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

pub fn hash_all(paths: &[PathBuf]) -> Result<Vec<FileHash>, CliError> {
    paths
        .iter()
        .map(|p| {
            Ok(FileHash {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

pub fn manifest_path(out_dir: &Path, stage: &str) -> PathBuf {
    out_dir.join(format!("{stage}.manifest.json"))
}

impl Manifest {
    pub fn read(path: &Path) -> Option<Manifest> {
        let text = std::fs::read_to_string(path).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }

    /// True when the recorded config and every recorded hash still match.
    pub fn is_current(&self, config: &serde_json::Value, inputs: &[PathBuf], outputs: &[PathBuf]) -> bool {
        let matches = |recorded: &[FileHash], paths: &[PathBuf]| {
            recorded.len() == paths.len()
                && recorded
                    .iter()
                    .zip(paths)
                    .all(|(h, p)| h.path == p.display().to_string() && sha256_file(p).is_ok_and(|s| s == h.sha256))
        };
        self.version == VERSION
            && &self.config == config
            && matches(&self.inputs, inputs)
            && matches(&self.outputs, outputs)
    }
}
