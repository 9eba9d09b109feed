//! Checkpoint files.
//!
//! ```text
//! 0    magic "LFCK"
//! 4    u32 version (1)
//! 8    u64 header length N
//! 16   N bytes of JSON (CheckpointHeader)
//! 16+N parameter blob: every tensor of `Params::named` in order, row-major,
//!      little-endian f64
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelDims, Params};

const MAGIC: [u8; 4] = *b"LFCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub dims: ModelDims,
    pub step: u64,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Params,
    pub step: u64,
}

pub fn save_checkpoint(path: &Path, params: &Params, step: u64) -> Result<()> {
    let header = CheckpointHeader {
        config: params.config,
        dims: params.dims,
        step,
        dtype: "f64".into(),
        tensors: params
            .named()
            .into_iter()
            .map(|(name, t)| TensorEntry {
                name,
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let mut bytes = Vec::with_capacity(16 + json.len() + params.num_scalars() * 8);
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for t in params.tensors() {
        for v in t.as_slice() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::storage(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::storage(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
    let bad = |why: &str| Error::corrupt(path, why.to_string());
    if bytes.len() < 16 || bytes[0..4] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| bad("header runs past end of file"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    if header.dtype != "f64" {
        return Err(bad(&format!("unsupported dtype {}", header.dtype)));
    }
    let mut params = Params::zeros(header.config, header.dims)?;
    let mut blob = &bytes[16 + hlen..];
    let named = params.named_mut();
    if named.len() != header.tensors.len() {
        return Err(bad("tensor count does not match config"));
    }
    for ((name, t), entry) in named.into_iter().zip(&header.tensors) {
        if name != entry.name || t.shape() != (entry.rows, entry.cols) {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint tensor {} ({}x{}) does not match expected {} {:?}",
                entry.name,
                entry.rows,
                entry.cols,
                name,
                t.shape()
            )));
        }
        let n = t.len() * 8;
        if blob.len() < n {
            return Err(bad("parameter blob truncated"));
        }
        for (v, chunk) in t.as_mut_slice().iter_mut().zip(blob[..n].chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        blob = &blob[n..];
    }
    if !blob.is_empty() {
        return Err(bad("trailing bytes after parameter blob"));
    }
    Ok(Checkpoint {
        params,
        step: header.step,
    })
}
