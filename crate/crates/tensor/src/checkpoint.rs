//! Checkpoint files.
//!
//! Layout:
//!
//! ```text
//! coperc-checkpoint 1\n
//! <header byte length, decimal>\n
//! <header: pretty-printed UTF-8 JSON>
//! <blob: little-endian f64 values of every tensor, in header order>
//! ```
//!
//! The header lists `{name, owner, dtype, shape, offset, trainable}` per
//! tensor, with `offset` in bytes from the start of the blob, plus a free-form
//! string map of metadata.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &str = "coperc-checkpoint 1";

#[derive(Serialize, Deserialize, Debug)]
struct TensorRecord {
    name: String,
    owner: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    trainable: bool,
}

#[derive(Serialize, Deserialize, Debug)]
struct Header {
    meta: BTreeMap<String, String>,
    tensors: Vec<TensorRecord>,
}

pub fn to_bytes(store: &ParamStore, meta: &BTreeMap<String, String>) -> Vec<u8> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut blob = Vec::new();
    for (name, e) in store.iter() {
        tensors.push(TensorRecord {
            name: name.to_string(),
            owner: e.owner.clone(),
            dtype: "f64".into(),
            shape: e.tensor.shape().to_vec(),
            offset: blob.len(),
            trainable: e.trainable,
        });
        for v in e.tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = serde_json::to_string_pretty(&Header { meta: meta.clone(), tensors }).expect("header serializes");
    let mut out = format!("{MAGIC}\n{}\n", header.len()).into_bytes();
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&blob);
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ParamStore, BTreeMap<String, String>)> {
    let fmt = |m: &str| TensorError::Format(m.to_string());
    let mut lines = bytes.splitn(3, |&b| b == b'\n');
    let magic = lines.next().ok_or_else(|| fmt("empty file"))?;
    if magic != MAGIC.as_bytes() {
        return Err(fmt("bad magic line"));
    }
    let len_line = lines.next().ok_or_else(|| fmt("missing header length"))?;
    let header_len: usize = std::str::from_utf8(len_line)
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| fmt("unparsable header length"))?;
    let rest = lines.next().ok_or_else(|| fmt("missing header"))?;
    if rest.len() < header_len {
        return Err(fmt("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&rest[..header_len]).map_err(|e| TensorError::Format(format!("header: {e}")))?;
    let blob = &rest[header_len..];
    let mut store = ParamStore::new();
    let mut expected_offset = 0;
    for rec in header.tensors {
        if rec.dtype != "f64" {
            return Err(TensorError::Format(format!("unsupported dtype {}", rec.dtype)));
        }
        if rec.offset != expected_offset {
            return Err(TensorError::Format(format!("tensor `{}` out of order", rec.name)));
        }
        let n: usize = rec.shape.iter().product();
        let end = rec.offset + n * 8;
        let raw = blob.get(rec.offset..end).ok_or_else(|| fmt("truncated blob"))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        store.insert(rec.name, rec.owner, Tensor::new(rec.shape, data)?, rec.trainable)?;
        expected_offset = end;
    }
    if expected_offset != blob.len() {
        return Err(fmt("trailing bytes after blob"));
    }
    Ok((store, header.meta))
}

pub fn save(path: impl AsRef<Path>, store: &ParamStore, meta: &BTreeMap<String, String>) -> Result<()> {
    std::fs::write(path, to_bytes(store, meta))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(ParamStore, BTreeMap<String, String>)> {
    from_bytes(&std::fs::read(path)?)
}
