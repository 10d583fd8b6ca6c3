use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{NfsError, Result};
use crate::pipeline::RunConfig;

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| NfsError::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

/// What one command did: the resolved config, its seeds, the digests of
/// everything it read and everything it wrote. Contains no timestamps, so
/// identical invocations produce identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub dataset_seed: u64,
    pub config: RunConfig,
    pub dataset_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_digest: Option<String>,
    /// Seed list of multi-run commands.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    /// Input files keyed by role, with their SHA-256.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    /// Output files relative to the run directory, with their SHA-256.
    #[serde(default)]
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: &RunConfig, dataset_digest: String) -> Self {
        Self {
            command: command.into(),
            seed,
            dataset_seed: config.data.seed,
            config: config.clone(),
            dataset_digest,
            split_digest: None,
            seeds: None,
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn record_input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.inputs.insert(role.into(), sha256_file(path)?);
        Ok(())
    }

    pub fn record(&mut self, root: &Path, path: &Path) -> Result<()> {
        let rel = path.strip_prefix(root).unwrap_or(path);
        let key = rel.to_string_lossy().replace('\\', "/");
        self.artifacts.insert(key, sha256_file(path)?);
        Ok(())
    }

    /// Merges this entry into `<root>/manifest.json`, which holds one
    /// entry per command that has written into the directory.
    pub fn save(&self, root: &Path) -> Result<PathBuf> {
        let path = root.join("manifest.json");
        let mut all: BTreeMap<String, RunManifest> = match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| NfsError::format(&path, e.to_string()))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(NfsError::io(&path, e)),
        };
        all.insert(self.command.clone(), self.clone());
        write_json(&path, &all)?;
        Ok(path)
    }
}

pub fn write_json<S: Serialize + ?Sized>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| NfsError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| NfsError::io(path, e))
}
