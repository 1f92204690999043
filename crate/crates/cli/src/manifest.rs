use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use igt_core::{IgtError, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Record of one command invocation.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    /// Input path to `sha256("blob <len>\0" + content)`.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub timings: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            ..Default::default()
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let hash = content_hash(&std::fs::read(path)?);
        self.inputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        write_json(&path, self)?;
        Ok(path)
    }
}

/// Git-style blob hash with SHA-256.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| IgtError::Invalid(format!("json: {e}")))
}

/// Writes via a temporary file and a rename.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, to_json(value)? + "\n")?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| IgtError::Data(format!("{}: {e}", path.display())))
}
