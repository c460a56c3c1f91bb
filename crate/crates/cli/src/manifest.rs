use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gcc_unet::data::DatasetSpec;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to repeat a run: the resolved flat config, the data it
/// read, and checksums of what it wrote.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: Map<String, Value>,
    pub datasets: Vec<DatasetSpec>,
    pub artifacts: BTreeMap<String, Artifact>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::usage(format!("reading {}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: Map<String, Value>) -> Self {
        RunManifest {
            command: command.into(),
            version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).into(),
            seed,
            config,
            datasets: Vec::new(),
            artifacts: BTreeMap::new(),
            timings: BTreeMap::new(),
        }
    }

    /// Records `dir/file` with its checksum, keyed by file name.
    pub fn add_artifact(&mut self, dir: &Path, file: &str) -> Result<(), CliError> {
        let path = dir.join(file);
        let sha256 = sha256_file(&path)?;
        self.artifacts
            .insert(file.into(), Artifact { path, sha256 });
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text =
            serde_json::to_string_pretty(self).map_err(|e| CliError::usage(e.to_string()))?;
        std::fs::write(&path, text + "\n")
            .map_err(|e| CliError::usage(format!("writing {}: {e}", path.display())))
    }
}
