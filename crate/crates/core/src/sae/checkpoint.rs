//! `ARDS` checkpoint format:
//!
//! ```text
//! "ARDS" | u32 version=1 | u32 d_x | u32 d_z | u32 K
//! W_enc  d_z*d_x f32, row-major
//! b_enc  d_z f32
//! W_dec  d_x*d_z f32, row-major
//! ```
//!
//! Everything little-endian.

use std::fs;
use std::path::Path;

use super::{Result, SaeError, SaeModel};
use crate::store::{decode_f32s, encode_f32s, write_atomic};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ARDS";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

pub fn encode_checkpoint(model: &SaeModel) -> Vec<u8> {
    let (d_x, d_z) = (model.d_x(), model.d_z());
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * (2 * d_x * d_z + d_z));
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [VERSION, d_x as u32, d_z as u32, model.topk() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    encode_f32s(&mut out, model.w_enc());
    encode_f32s(&mut out, model.b_enc());
    encode_f32s(&mut out, &model.w_dec_row_major());
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<SaeModel> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(SaeError::MagicMismatch);
    }
    if bytes.len() < HEADER_LEN {
        return Err(SaeError::TruncatedPayload {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let version = word(1) as u32;
    if version != VERSION {
        return Err(SaeError::UnsupportedVersion(version));
    }
    let (d_x, d_z, topk) = (word(2), word(3), word(4));
    if d_x == 0 || d_z == 0 || d_z % d_x != 0 || topk == 0 || topk > d_z {
        return Err(SaeError::InvalidDimensions(format!(
            "d_x={d_x}, d_z={d_z}, K={topk}"
        )));
    }
    let n_enc = d_z * d_x;
    let expected = HEADER_LEN + 4 * (2 * n_enc + d_z);
    if bytes.len() < expected {
        return Err(SaeError::TruncatedPayload {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(SaeError::InvalidDimensions(format!(
            "{} trailing bytes after weights",
            bytes.len() - expected
        )));
    }
    let body = decode_f32s(&bytes[HEADER_LEN..]);
    let (w_enc, rest) = body.split_at(n_enc);
    let (b_enc, w_dec) = rest.split_at(d_z);
    SaeModel::from_parts(d_x, d_z, topk, w_enc.to_vec(), b_enc.to_vec(), w_dec.to_vec())
}

pub fn save_checkpoint(model: &SaeModel, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SaeModel> {
    decode_checkpoint(&fs::read(path)?)
}
