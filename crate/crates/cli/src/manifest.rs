//! Run manifests: enough to replay a command and reproduce its outputs
//! byte for byte. No timestamps, nothing machine-specific.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Named input paths (hypotheses, basis, corpus, ...), sorted by key.
    pub inputs: BTreeMap<String, PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub version: String,
    /// Resolved command-specific flags so a replay needs nothing else.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl RunManifest {
    pub fn new(command: &str, out: &Path) -> Self {
        Self {
            command: command.to_string(),
            inputs: BTreeMap::new(),
            config: None,
            seed: None,
            out: out.to_path_buf(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            extra: BTreeMap::new(),
        }
    }

    pub fn extra<T: Serialize>(mut self, name: &str, value: &T) -> Self {
        self.extra.insert(
            name.to_string(),
            serde_json::to_value(value).expect("manifest extras serialize"),
        );
        self
    }

    pub fn input(mut self, name: &str, path: &Path) -> Self {
        self.inputs.insert(name.to_string(), path.to_path_buf());
        self
    }

    pub fn config(mut self, path: Option<&PathBuf>) -> Self {
        self.config = path.cloned();
        self
    }

    pub fn seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    /// Writes `<out>/manifest.json` for a directory output.
    pub fn write_in_dir(&self) -> Result<()> {
        crate::records::write_json(&self.out.join("manifest.json"), self)
    }

    /// Writes `<stem>.manifest.json` next to a file output.
    pub fn write_beside_file(&self) -> Result<()> {
        crate::records::write_json(&self.out.with_extension("manifest.json"), self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::records::read_json(path)
    }
}
