//! Self-describing parameter container.
//!
//! Layout: 8-byte magic `VLMDCKPT`, `u32` format version, `u64` header
//! length, a UTF-8 JSON header `{"meta": ..., "tensors": [{"name", "shape"}]}`,
//! then every tensor's data as little-endian `f32` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{NnError, ParamStore, Result, Tensor};

const MAGIC: &[u8; 8] = b"VLMDCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn to_bytes(meta: &serde_json::Value, store: &ParamStore) -> Result<Vec<u8>> {
    let header = Header {
        meta: meta.clone(),
        tensors: store
            .iter()
            .map(|(_, name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + header.len() + store.num_elements() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, _, t) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(serde_json::Value, ParamStore)> {
    let bad = |m: &str| NnError::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(NnError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut offset = 20 + hlen;
    let mut store = ParamStore::new();
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(offset..offset + 4 * n)
            .ok_or_else(|| bad("truncated tensor data"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.add(entry.name, Tensor::new(&entry.shape, data)?);
        offset += 4 * n;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok((header.meta, store))
}

/// Writes through a temporary file and renames, so readers never observe a
/// partially written checkpoint.
pub fn save(path: &Path, meta: &serde_json::Value, store: &ParamStore) -> Result<()> {
    let bytes = to_bytes(meta, store)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(serde_json::Value, ParamStore)> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}
