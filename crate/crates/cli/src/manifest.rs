//! Run manifests.
//!
//! Every command writes a `manifest.json` next to its artifacts recording
//! what produced them: tool version, command name, effective seed, a hash of
//! the exact config bytes, hashes of any file inputs, and the list of files
//! written. Re-running a command with the same config and seed reproduces
//! every artifact byte for byte; only `created_unix` differs.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use switchdiff_core::seeding::sha256_hex;
use switchdiff_core::{CoreError, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    /// SHA-256 of the config file bytes as read from disk.
    pub config_sha256: String,
    /// Input path (as given in the config) to SHA-256 of its bytes.
    pub input_hashes: BTreeMap<String, String>,
    /// File names written into the output directory, sorted.
    pub outputs: Vec<String>,
    /// Wall-clock creation time; the only field allowed to differ between
    /// reruns of the same command.
    pub created_unix: u64,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config_bytes: &[u8]) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            config_sha256: sha256_hex(config_bytes),
            input_hashes: BTreeMap::new(),
            outputs: Vec::new(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    /// Record an input file by hashing its current bytes.
    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| {
            CoreError::NotFound(format!("cannot read input {}: {e}", path.display()))
        })?;
        self.input_hashes
            .insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn add_output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    /// Serialize to `<out_dir>/manifest.json` with sorted outputs.
    pub fn write(mut self, out_dir: &Path) -> Result<()> {
        self.outputs.sort();
        self.outputs.push("manifest.json".to_string());
        self.outputs.sort();
        self.outputs.dedup();
        let json = serde_json::to_string_pretty(&self)?;
        std::fs::write(out_dir.join("manifest.json"), json.as_bytes() as &[u8])?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            CoreError::NotFound(format!("cannot read manifest {}: {e}", path.display()))
        })?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}
