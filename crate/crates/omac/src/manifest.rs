//! Run manifests: a JSON record of what a command did, with SHA-256
//! content hashes of its inputs and outputs so runs can be audited and
//! compared for reproducibility.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub wall_clock_secs: f64,
    /// Content hashes keyed by role, e.g. "dataset", "checkpoint", "metrics".
    pub hashes: std::collections::BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config,
            seed,
            wall_clock_secs: 0.0,
            hashes: Default::default(),
        }
    }

    pub fn add_file_hash(&mut self, role: &str, path: &Path) -> Result<()> {
        self.hashes.insert(role.to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| crate::error::OmacError::Validation(format!("manifest serialization failed: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}
