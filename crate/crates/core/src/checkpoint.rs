//! Versioned parameter archive shared by score and reconstruction checkpoints.
//!
//! Layout: magic `PHASEFORGE-CKPT-v1`, `u64` LE header length, JSON header
//! `{kind, meta, tensors: [{name, dtype, shape, offset}]}`, then raw LE data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Scalar, Tensor};

pub const MAGIC: &[u8] = b"PHASEFORGE-CKPT-v1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

pub fn write_archive<T: Scalar, M: Serialize>(
    path: &Path,
    kind: &str,
    meta: &M,
    params: &ParamStore<T>,
) -> Result<()> {
    let mut data = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            dtype: T::DTYPE.to_string(),
            shape: t.shape().to_vec(),
            offset: data.len(),
        });
        data.extend(T::to_le_bytes_vec(t.data()));
    }
    let header = serde_json::to_vec(&Header {
        kind: kind.into(),
        meta: serde_json::to_value(meta)?,
        tensors,
    })?;
    let mut bytes = Vec::with_capacity(MAGIC.len() + 8 + header.len() + data.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&data);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Returns the metadata value and the named tensors in file order.
pub fn read_archive<T: Scalar>(path: &Path, kind: &str) -> Result<(Value, Vec<(String, Tensor<T>)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    if !bytes.starts_with(MAGIC) {
        return Err(bad("missing PHASEFORGE-CKPT-v1 magic".into()));
    }
    let start = MAGIC.len() + 8;
    if bytes.len() < start {
        return Err(bad("truncated header".into()));
    }
    let hlen = u64::from_le_bytes(bytes[MAGIC.len()..start].try_into().expect("8 bytes")) as usize;
    let data_start = start
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[start..data_start])?;
    if header.kind != kind {
        return Err(bad(format!("expected a {kind} checkpoint, found {}", header.kind)));
    }
    let data = &bytes[data_start..];
    let width = std::mem::size_of::<T>();
    let mut out = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        if e.dtype != T::DTYPE {
            return Err(bad(format!("tensor {} has dtype {}, expected {}", e.name, e.dtype, T::DTYPE)));
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * width;
        if end > data.len() {
            return Err(bad(format!("tensor {} runs past the end of the file", e.name)));
        }
        let values = T::from_le_bytes_slice(&data[e.offset..end]);
        out.push((e.name, Tensor::new(&e.shape, values)));
    }
    Ok((header.meta, out))
}
