//! Run manifests: what a command read, wrote, and how long each stage took.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use hwmor::{Error, Result};

pub fn sha256_bytes(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    /// Artifact path → sha256 at write time.
    pub artifacts: BTreeMap<String, String>,
    pub stage_seconds: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, config_json: &str, seed: u64) -> Self {
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_sha256: sha256_bytes(config_json.as_bytes()),
            seed,
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            stage_seconds: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<String> {
        let hash = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), hash.clone());
        Ok(hash)
    }

    pub fn artifact(&mut self, path: &Path) -> Result<()> {
        let hash = sha256_file(path)?;
        self.artifacts.insert(path.display().to_string(), hash);
        Ok(())
    }

    pub fn stage(&mut self, name: &str, seconds: f64) {
        self.stage_seconds.insert(name.into(), seconds);
    }

    /// `<primary>.manifest.json`.
    pub fn path_for(primary: &Path) -> PathBuf {
        let mut name = primary.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        primary.with_file_name(name)
    }

    pub fn save(&self, primary: &Path) -> Result<PathBuf> {
        for path in self.artifacts.keys() {
            if !Path::new(path).exists() {
                return Err(Error::Provenance(format!("artifact {path} is missing")));
            }
        }
        let path = Self::path_for(primary);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Paths whose current hash differs from the recorded one.
    pub fn verify(&self) -> Result<Vec<String>> {
        let mut changed = Vec::new();
        for (path, hash) in self.inputs.iter().chain(&self.artifacts) {
            match sha256_file(Path::new(path)) {
                Ok(h) if &h == hash => {}
                _ => changed.push(path.clone()),
            }
        }
        Ok(changed)
    }
}
