use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::store::{self, sha256_hex};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

/// What a command read, how it was configured, and what it wrote. Output
/// paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    /// Fully resolved configuration; enough to rerun the command.
    pub config: serde_json::Value,
    pub inputs: Vec<FileEntry>,
    /// Hash over the input contents only, so moved data keeps its hash.
    pub input_hash: String,
    pub outputs: Vec<FileEntry>,
}

pub fn content_hash(entries: &[FileEntry]) -> String {
    let joined: String = entries.iter().map(|e| e.sha256.as_str()).collect::<Vec<_>>().join("\n");
    sha256_hex(joined.as_bytes())
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: &impl Serialize, inputs: Vec<FileEntry>) -> Result<Self> {
        Ok(RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: serde_json::to_value(config)?,
            input_hash: content_hash(&inputs),
            inputs,
            outputs: Vec::new(),
        })
    }

    pub fn add_output(&mut self, rel: &str, sha256: String) {
        self.outputs.retain(|o| o.path != rel);
        self.outputs.push(FileEntry { path: rel.to_string(), sha256 });
    }

    pub fn output_hash(&self) -> String {
        content_hash(&self.outputs)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST);
        store::write_json(&path, self)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST) } else { path.to_path_buf() };
        let bytes = store::read(&path)?;
        serde_json::from_slice(&bytes).with_context(|| format!("parsing manifest {}", path.display()))
    }

    /// Re-hashes every output under `dir`; lists the paths that differ.
    pub fn verify_outputs(&self, dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for o in &self.outputs {
            let p = dir.join(&o.path);
            if !p.exists() || store::hash_file(&p)? != o.sha256 {
                bad.push(o.path.clone());
            }
        }
        Ok(bad)
    }

    /// Outputs compared with another manifest of the same command.
    pub fn diff_outputs(&self, other: &RunManifest) -> Vec<String> {
        let mut diff = Vec::new();
        for o in &self.outputs {
            match other.outputs.iter().find(|p| p.path == o.path) {
                Some(p) if p.sha256 == o.sha256 => {}
                Some(_) => diff.push(format!("{}: content differs", o.path)),
                None => diff.push(format!("{}: missing", o.path)),
            }
        }
        for p in &other.outputs {
            if !self.outputs.iter().any(|o| o.path == p.path) {
                diff.push(format!("{}: unexpected", p.path));
            }
        }
        diff
    }

    pub fn expect_command(&self, command: &str) -> Result<()> {
        if self.command != command {
            bail!("manifest records command {:?}, expected {command:?}", self.command);
        }
        Ok(())
    }
}
