//! CRFT feature shards: a fixed little-endian container for one `T × D`
//! matrix.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "CRFT"
//! 4       4           version, u32 LE (= 1)
//! 8       4           ndim, u32 LE (= 2)
//! 12      8 * ndim    dims, u64 LE each
//! 12+8n   4 * prod    payload, f32 LE, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{CrabError, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"CRFT";
pub const VERSION: u32 = 1;
const NDIM: u32 = 2;
const HEADER_LEN: usize = 12 + 8 * NDIM as usize;

/// Serializes a finite 2-D tensor.
pub fn encode_shard(tensor: &Tensor) -> Result<Vec<u8>> {
    if tensor.rank() != 2 {
        return Err(CrabError::dim("write_shard", format!("shards hold 2-D tensors, got shape {:?}", tensor.shape())));
    }
    if !tensor.is_finite() {
        return Err(CrabError::Data("refusing to write a shard with non-finite values".into()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * tensor.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&NDIM.to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        #[allow(clippy::unnecessary_cast)] // not a no-op under the f64 feature
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parses shard bytes; `path` only labels errors.
pub fn decode_shard(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let fail = |offset: usize, detail: String| CrabError::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail,
    };
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    if bytes.len() < 12 {
        return Err(fail(bytes.len(), format!("header needs at least 12 bytes, file has {}", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail(0, format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u32_at(4);
    if version != VERSION {
        return Err(fail(4, format!("unsupported version {version}")));
    }
    let ndim = u32_at(8);
    if ndim != NDIM {
        return Err(fail(8, format!("ndim must be {NDIM}, got {ndim}")));
    }
    if bytes.len() < HEADER_LEN {
        return Err(fail(bytes.len(), format!("truncated dims: expected {HEADER_LEN} header bytes, found {}", bytes.len())));
    }
    let mut dims = [0usize; 2];
    for (i, d) in dims.iter_mut().enumerate() {
        let o = 12 + 8 * i;
        let raw = u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        *d = usize::try_from(raw).map_err(|_| fail(o, format!("dimension {raw} too large")))?;
    }
    let expected = dims[0]
        .checked_mul(dims[1])
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| fail(12, format!("dims {dims:?} overflow")))?;
    let actual = bytes.len() - HEADER_LEN;
    if actual != expected {
        let what = if actual < expected { "truncated payload" } else { "trailing bytes after payload" };
        return Err(fail(HEADER_LEN + actual.min(expected), format!("{what}: expected {expected} payload bytes, found {actual}")));
    }
    let data: Vec<Real> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as Real)
        .collect();
    Tensor::new(dims.to_vec(), data).map_err(|e| fail(12, e.to_string()))
}

pub fn write_shard(path: &Path, tensor: &Tensor) -> Result<()> {
    let bytes = encode_shard(tensor)?;
    fs::write(path, bytes).map_err(|e| CrabError::io(path, e))
}

pub fn read_shard(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| CrabError::io(path, e))?;
    decode_shard(&bytes, path)
}
