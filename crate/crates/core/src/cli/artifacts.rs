//! Output files and their `.meta` sidecars.
//!
//! Every artifact `x` is accompanied by `x.meta`, which records the hash of
//! the configuration that produced it and the SHA-256 of its bytes. A cached
//! artifact is reused only if both still match.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub config_hash: String,
    pub sha256: String,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to `path` and its sidecar.
pub fn write_artifact(path: &Path, bytes: &[u8], config_hash: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let meta = Meta { config_hash: config_hash.to_string(), sha256: sha256_hex(bytes) };
    let text = toml::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?;
    let mp = meta_path(path);
    fs::write(&mp, text).map_err(|e| Error::io(&mp, e))
}

pub fn read_meta(path: &Path) -> Result<Meta> {
    let mp = meta_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    toml::from_str(&text).map_err(|e| Error::format(&mp, e.to_string()))
}

/// True when `path` exists, was produced under `config_hash` and is intact.
pub fn is_valid(path: &Path, config_hash: &str) -> bool {
    let Ok(meta) = read_meta(path) else { return false };
    if meta.config_hash != config_hash {
        return false;
    }
    fs::read(path).is_ok_and(|b| sha256_hex(&b) == meta.sha256)
}
