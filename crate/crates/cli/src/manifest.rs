//! Run manifest: the full parameter set plus a SHA-256 digest of every report.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: &'static str,
    pub seed: u64,
    pub live: bool,
    pub params: serde_json::Value,
    /// File name to hex SHA-256.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    /// Writes every `(name, content)` under `dir`, then the manifest.
    pub fn write<P: Serialize>(dir: &Path, subcommand: &str, params: &P, files: &[(String, String)]) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let mut outputs = BTreeMap::new();
        for (name, content) in files {
            let path = dir.join(name);
            fs::write(&path, content).with_context(|| format!("cannot write {}", path.display()))?;
            outputs.insert(name.clone(), hex::encode(Sha256::digest(content.as_bytes())));
        }
        let params = serde_json::to_value(params)?;
        let manifest = Self {
            subcommand: subcommand.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            seed: params["seed"].as_u64().unwrap_or_default(),
            live: pic_core::engine::Mode::from_env() == pic_core::engine::Mode::Live,
            params,
            outputs,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(manifest)
    }
}
