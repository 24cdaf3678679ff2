//! Filesystem plumbing: atomic writes, content hashes, archives.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use aitok_core::tensor::io::Archive;
use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Writes through a temporary file in the target directory, then renames,
/// so readers never see a partial file. Returns the content hash.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<String> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("temp file in {}", dir.display()))?;
    tmp.write_all(bytes).with_context(|| format!("writing {}", path.display()))?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(sha256_hex(bytes))
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read(path)?))
}

pub fn read_archive(path: &Path) -> Result<Archive<f32>> {
    Archive::from_bytes(&read(path)?).with_context(|| format!("decoding {}", path.display()))
}

pub fn write_archive(path: &Path, a: &Archive<f32>) -> Result<String> {
    write_atomic(path, &a.to_bytes()?)
}

pub fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

/// Relative paths are taken from `root`.
pub fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}
