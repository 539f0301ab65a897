use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::store::write_atomic;

pub const DEFAULT_CACHE_DIR: &str = ".ard-cache";
pub const CACHE_DIR_ENV: &str = "ARD_CACHE_DIR";

pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// Cache directory: `$ARD_CACHE_DIR` if set, else `.ard-cache` in the
/// working directory.
pub fn default_cache_dir() -> PathBuf {
    std::env::var_os(CACHE_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE_DIR))
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    kind: String,
    value: String,
}

/// Content-addressed store of provider responses: one JSON file per key,
/// named by the SHA-256 of the key parts.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Key from parts, joined with NUL so that part boundaries are unambiguous.
    pub fn key(parts: &[&str]) -> String {
        sha256_hex(parts.join("\0"))
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let text = fs::read_to_string(self.path(key)).ok()?;
        serde_json::from_str::<Entry>(&text).ok().map(|e| e.value)
    }

    pub fn put(&self, key: &str, kind: &str, value: &str) -> io::Result<()> {
        let entry = Entry {
            kind: kind.to_string(),
            value: value.to_string(),
        };
        let text = serde_json::to_string_pretty(&entry).map_err(io::Error::other)?;
        write_atomic(&self.path(key), text.as_bytes())
    }
}
