//! JSON files passed between pipeline stages.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use ard_core::retrieval::RepresentativeSet;
use ard_core::store::write_atomic;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const SCORES_SCHEMA: u32 = 1;

/// `scores.json`: representative sets for every feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoresFile {
    pub schema: u32,
    pub p: usize,
    pub d_z: usize,
    pub features: Vec<RepresentativeSet>,
}

/// `refs.json`: reference labels for evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefsFile {
    pub labels: Vec<RefLabel>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefLabel {
    pub id: String,
    pub text: String,
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}
