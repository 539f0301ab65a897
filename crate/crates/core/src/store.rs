//! On-disk activation store.
//!
//! A store is a directory:
//!
//! ```text
//! manifest.json          clip list and widths
//! actv/<clip_id>.actv    "ARD1", u32 T, u32 d_x, T*d_x f32 (row-major)
//! emb/<id>.emb           "ARDE", u32 d_e, d_e f32
//! audio/<clip_id>.wav    optional, referenced by ClipEntry::audio_path
//! ```
//!
//! All integers are u32 little-endian and all floats IEEE-754 binary32
//! little-endian. Opening a store reads only `manifest.json`; tensor payloads
//! are loaded per clip on demand.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ACTIVATION_MAGIC: &[u8; 4] = b"ARD1";
pub const EMBEDDING_MAGIC: &[u8; 4] = b"ARDE";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("no manifest.json under {0}")]
    MissingManifest(PathBuf),
    #[error("manifest schema error: {0}")]
    ManifestSchemaError(String),
    #[error("duplicate clip id {0:?}")]
    DuplicateClipId(String),
    #[error("unknown clip {0:?}")]
    UnknownClip(String),
    #[error("invalid identifier {0:?}: expected [A-Za-z0-9_-]+")]
    InvalidId(String),
    #[error("{path}: bad magic, expected {expected:?}")]
    MagicMismatch { path: PathBuf, expected: String },
    #[error("clip {clip_id}: header says T={file_tokens}, d_x={file_width} but manifest says T={manifest_tokens}, d_x={manifest_width}")]
    HeaderMismatch {
        clip_id: String,
        file_tokens: u32,
        file_width: u32,
        manifest_tokens: u32,
        manifest_width: u32,
    },
    #[error("{path}: truncated payload ({actual} bytes, expected {expected})")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: {extra} trailing bytes after payload")]
    TrailingBytes { path: PathBuf, extra: usize },
    #[error("non-finite value at index {index} of {id}")]
    NonFiniteValue { id: String, index: usize },
    #[error("embedding {0} has zero norm")]
    ZeroNormEmbedding(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

/// Clip and embedding identifiers double as file stems, so they are restricted
/// to `[A-Za-z0-9_-]+`.
pub fn is_valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

fn check_id(id: &str) -> Result<()> {
    if is_valid_id(id) {
        Ok(())
    } else {
        Err(StoreError::InvalidId(id.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub id: String,
    pub num_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub version: u32,
    /// Source layer of the activations. Opaque to the toolkit.
    pub layer_tag: String,
    pub d_x: u32,
    pub d_e: u32,
    pub clips: Vec<ClipEntry>,
}

impl StoreManifest {
    pub fn new(layer_tag: impl Into<String>, d_x: u32, d_e: u32) -> Self {
        Self {
            version: MANIFEST_VERSION,
            layer_tag: layer_tag.into(),
            d_x,
            d_e,
            clips: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_x == 0 {
            return Err(StoreError::ManifestSchemaError("d_x must be >= 1".into()));
        }
        if self.d_e == 0 {
            return Err(StoreError::ManifestSchemaError("d_e must be >= 1".into()));
        }
        let mut seen = HashSet::with_capacity(self.clips.len());
        for clip in &self.clips {
            if !is_valid_id(&clip.id) {
                return Err(StoreError::ManifestSchemaError(format!(
                    "clip id {:?} does not match [A-Za-z0-9_-]+",
                    clip.id
                )));
            }
            if clip.num_tokens == 0 {
                return Err(StoreError::ManifestSchemaError(format!(
                    "clip {} has num_tokens = 0",
                    clip.id
                )));
            }
            if !seen.insert(clip.id.as_str()) {
                return Err(StoreError::DuplicateClipId(clip.id.clone()));
            }
        }
        Ok(())
    }

    pub fn total_tokens(&self) -> u64 {
        self.clips.iter().map(|c| c.num_tokens as u64).sum()
    }
}

/// One clip's `T x d_x` activation matrix, token-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    pub clip_id: String,
    pub num_tokens: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl ActivationTensor {
    pub fn new(
        clip_id: impl Into<String>,
        num_tokens: usize,
        width: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        let clip_id = clip_id.into();
        if values.len() != num_tokens * width {
            return Err(StoreError::Shape(format!(
                "{} values for a {}x{} tensor",
                values.len(),
                num_tokens,
                width
            )));
        }
        Ok(Self {
            clip_id,
            num_tokens,
            width,
            values,
        })
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.width..(t + 1) * self.width]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.width.max(1))
    }

    fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(StoreError::NonFiniteValue {
                id: self.clip_id.clone(),
                index,
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticEmbedding {
    pub id: String,
    pub values: Vec<f32>,
}

impl SemanticEmbedding {
    pub fn new(id: impl Into<String>, values: Vec<f32>) -> Self {
        Self {
            id: id.into(),
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| v as f64 * v as f64)
            .sum::<f64>()
            .sqrt()
    }
}

/// Embedding key for a reference label.
pub fn label_embedding_id(label_id: &str) -> String {
    format!("label_{label_id}")
}

/// Embedding key for a named concept.
pub fn concept_embedding_id(feature: usize) -> String {
    format!("concept_{feature}")
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

/// Write `bytes` to `path` via a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = parent.join(format!(
        ".{file_name}.{}.{:?}.tmp",
        std::process::id(),
        std::thread::current().id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

pub(crate) fn decode_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub(crate) fn encode_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Encode an activation tensor in the `ARD1` format.
pub fn encode_activation(tensor: &ActivationTensor) -> Result<Vec<u8>> {
    tensor.check_finite()?;
    let mut out = Vec::with_capacity(12 + tensor.values.len() * 4);
    out.extend_from_slice(ACTIVATION_MAGIC);
    out.extend_from_slice(&(tensor.num_tokens as u32).to_le_bytes());
    out.extend_from_slice(&(tensor.width as u32).to_le_bytes());
    encode_f32s(&mut out, &tensor.values);
    Ok(out)
}

/// Decode an `ARD1` payload. Returns `(T, d_x, values)`.
pub fn decode_activation(path: &Path, bytes: &[u8]) -> Result<(u32, u32, Vec<f32>)> {
    if bytes.len() < 4 || &bytes[..4] != ACTIVATION_MAGIC {
        return Err(StoreError::MagicMismatch {
            path: path.to_path_buf(),
            expected: "ARD1".into(),
        });
    }
    if bytes.len() < 12 {
        return Err(StoreError::TruncatedPayload {
            path: path.to_path_buf(),
            expected: 12,
            actual: bytes.len(),
        });
    }
    let t = read_u32(bytes, 4);
    let d = read_u32(bytes, 8);
    let expected = 12 + t as usize * d as usize * 4;
    check_length(path, bytes.len(), expected)?;
    Ok((t, d, decode_f32s(&bytes[12..])))
}

pub fn encode_embedding(emb: &SemanticEmbedding) -> Result<Vec<u8>> {
    if let Some(index) = emb.values.iter().position(|v| !v.is_finite()) {
        return Err(StoreError::NonFiniteValue {
            id: emb.id.clone(),
            index,
        });
    }
    let mut out = Vec::with_capacity(8 + emb.values.len() * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&(emb.values.len() as u32).to_le_bytes());
    encode_f32s(&mut out, &emb.values);
    Ok(out)
}

pub fn decode_embedding(path: &Path, id: &str, bytes: &[u8]) -> Result<SemanticEmbedding> {
    if bytes.len() < 4 || &bytes[..4] != EMBEDDING_MAGIC {
        return Err(StoreError::MagicMismatch {
            path: path.to_path_buf(),
            expected: "ARDE".into(),
        });
    }
    if bytes.len() < 8 {
        return Err(StoreError::TruncatedPayload {
            path: path.to_path_buf(),
            expected: 8,
            actual: bytes.len(),
        });
    }
    let d = read_u32(bytes, 4) as usize;
    check_length(path, bytes.len(), 8 + d * 4)?;
    let emb = SemanticEmbedding::new(id, decode_f32s(&bytes[8..]));
    if let Some(index) = emb.values.iter().position(|v| !v.is_finite()) {
        return Err(StoreError::NonFiniteValue {
            id: id.to_string(),
            index,
        });
    }
    if emb.norm() == 0.0 {
        return Err(StoreError::ZeroNormEmbedding(id.to_string()));
    }
    Ok(emb)
}

fn check_length(path: &Path, actual: usize, expected: usize) -> Result<()> {
    if actual < expected {
        Err(StoreError::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            actual,
        })
    } else if actual > expected {
        Err(StoreError::TrailingBytes {
            path: path.to_path_buf(),
            extra: actual - expected,
        })
    } else {
        Ok(())
    }
}

/// Handle to an opened store. Cheap to open: only the manifest is read.
#[derive(Debug, Clone)]
pub struct ActivationStore {
    root: PathBuf,
    manifest: StoreManifest,
    index: HashMap<String, usize>,
}

impl ActivationStore {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(MANIFEST_FILE);
        let text = match fs::read_to_string(&path) {
            Ok(text) => text,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StoreError::MissingManifest(root))
            }
            Err(e) => return Err(io_err(&path)(e)),
        };
        let manifest: StoreManifest = serde_json::from_str(&text)
            .map_err(|e| StoreError::ManifestSchemaError(e.to_string()))?;
        Self::from_manifest(root, manifest)
    }

    /// Create a new store at `root` (creating directories as needed) and
    /// persist `manifest`. Tensors are written afterwards with
    /// [`write_activation`](Self::write_activation).
    pub fn create(root: impl AsRef<Path>, manifest: StoreManifest) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        for dir in [root.clone(), root.join("actv"), root.join("emb")] {
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        let store = Self::from_manifest(root, manifest)?;
        store.persist_manifest()?;
        Ok(store)
    }

    fn from_manifest(root: PathBuf, manifest: StoreManifest) -> Result<Self> {
        manifest.validate()?;
        let index = manifest
            .clips
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id.clone(), i))
            .collect();
        Ok(Self {
            root,
            manifest,
            index,
        })
    }

    fn persist_manifest(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| StoreError::ManifestSchemaError(e.to_string()))?;
        text.push('\n');
        write_atomic(&path, text.as_bytes()).map_err(io_err(&path))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn d_x(&self) -> usize {
        self.manifest.d_x as usize
    }

    pub fn clip(&self, clip_id: &str) -> Option<&ClipEntry> {
        self.index.get(clip_id).map(|&i| &self.manifest.clips[i])
    }

    pub fn clip_ids(&self) -> impl Iterator<Item = &str> {
        self.manifest.clips.iter().map(|c| c.id.as_str())
    }

    pub fn activation_path(&self, clip_id: &str) -> PathBuf {
        self.root.join("actv").join(format!("{clip_id}.actv"))
    }

    pub fn embedding_path(&self, id: &str) -> PathBuf {
        self.root.join("emb").join(format!("{id}.emb"))
    }

    /// Resolved path of a clip's audio file, if the manifest names one.
    pub fn audio_path(&self, clip_id: &str) -> Option<PathBuf> {
        self.clip(clip_id)
            .and_then(|c| c.audio_path.as_ref())
            .map(|p| self.root.join(p))
    }

    pub fn load_activation(&self, clip_id: &str) -> Result<ActivationTensor> {
        let entry = self
            .clip(clip_id)
            .ok_or_else(|| StoreError::UnknownClip(clip_id.to_string()))?;
        let path = self.activation_path(clip_id);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        if bytes.len() >= 12 && &bytes[..4] == ACTIVATION_MAGIC {
            let (t, d) = (read_u32(&bytes, 4), read_u32(&bytes, 8));
            if t != entry.num_tokens || d != self.manifest.d_x {
                return Err(StoreError::HeaderMismatch {
                    clip_id: clip_id.to_string(),
                    file_tokens: t,
                    file_width: d,
                    manifest_tokens: entry.num_tokens,
                    manifest_width: self.manifest.d_x,
                });
            }
        }
        let (t, d, values) = decode_activation(&path, &bytes)?;
        let tensor = ActivationTensor {
            clip_id: clip_id.to_string(),
            num_tokens: t as usize,
            width: d as usize,
            values,
        };
        tensor.check_finite()?;
        Ok(tensor)
    }

    /// Write one clip's tensor. The clip must already be listed in the
    /// manifest with a matching token count.
    pub fn write_activation(&self, tensor: &ActivationTensor) -> Result<()> {
        let entry = self
            .clip(&tensor.clip_id)
            .ok_or_else(|| StoreError::UnknownClip(tensor.clip_id.clone()))?;
        if tensor.num_tokens != entry.num_tokens as usize || tensor.width != self.d_x() {
            return Err(StoreError::HeaderMismatch {
                clip_id: tensor.clip_id.clone(),
                file_tokens: tensor.num_tokens as u32,
                file_width: tensor.width as u32,
                manifest_tokens: entry.num_tokens,
                manifest_width: self.manifest.d_x,
            });
        }
        let bytes = encode_activation(tensor)?;
        let path = self.activation_path(&tensor.clip_id);
        write_atomic(&path, &bytes).map_err(io_err(&path))
    }

    pub fn load_embedding(&self, id: &str) -> Result<SemanticEmbedding> {
        check_id(id)?;
        let path = self.embedding_path(id);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        decode_embedding(&path, id, &bytes)
    }

    pub fn has_embedding(&self, id: &str) -> bool {
        is_valid_id(id) && self.embedding_path(id).is_file()
    }

    pub fn write_embedding(&self, emb: &SemanticEmbedding) -> Result<()> {
        check_id(&emb.id)?;
        if emb.norm() == 0.0 {
            return Err(StoreError::ZeroNormEmbedding(emb.id.clone()));
        }
        let bytes = encode_embedding(emb)?;
        let dir = self.root.join("emb");
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = self.embedding_path(&emb.id);
        write_atomic(&path, &bytes).map_err(io_err(&path))
    }
}
