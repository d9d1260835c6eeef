//! Single-file parameter archive.
//!
//! Layout: the 8-byte magic `HOICKPT\0`, a little-endian `u32` format
//! version, a little-endian `u64` manifest length, the UTF-8 JSON manifest,
//! then every parameter as contiguous little-endian `f32` values in manifest
//! order. Parameters are held as `f64` in memory and rounded to `f32` on
//! save, so a save/load/save cycle reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use hoi_autograd::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"HOICKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Model family, e.g. `"decoupled"`, `"joint"` or `"oracle"`.
    pub kind: String,
    /// Last completed training stage (0 before training).
    pub stage: u8,
    /// Free-form model description needed to rebuild the network.
    pub meta: serde_json::Value,
    pub params: ParamStore,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    dtype: String,
    kind: String,
    stage: u8,
    meta: serde_json::Value,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: [usize; 2],
    /// Byte offset from the start of the data section.
    offset: usize,
    /// Number of `f32` values.
    len: usize,
}

/// Rounds every parameter to the nearest `f32`, matching what a checkpoint
/// stores.
pub fn snap_to_f32(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut params = Vec::with_capacity(ckpt.params.len());
    let mut offset = 0;
    for (_, name, t) in ckpt.params.iter() {
        params.push(ParamEntry { name: name.to_string(), shape: [t.rows(), t.cols()], offset, len: t.len() });
        offset += 4 * t.len();
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: "f32".into(),
        kind: ckpt.kind.clone(),
        stage: ckpt.stage,
        meta: ckpt.meta.clone(),
        params,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(format!("manifest encoding: {e}")))?;
    let mut out = Vec::with_capacity(20 + json.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in ckpt.params.iter() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let err = |m: String| Error::Checkpoint(m);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(err("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(err(format!("unsupported format version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let data_start = 20usize.checked_add(mlen).filter(|&e| e <= bytes.len()).ok_or_else(|| err("truncated manifest".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[20..data_start]).map_err(|e| err(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION || manifest.dtype != "f32" {
        return Err(err(format!("unsupported manifest version {} / dtype {}", manifest.format_version, manifest.dtype)));
    }
    let data = &bytes[data_start..];
    let mut params = ParamStore::new();
    let mut expected_offset = 0;
    for p in &manifest.params {
        if p.shape[0] * p.shape[1] != p.len || p.offset != expected_offset {
            return Err(err(format!("inconsistent entry for `{}`", p.name)));
        }
        let end = p.offset + 4 * p.len;
        if end > data.len() {
            return Err(err(format!("truncated data for `{}`", p.name)));
        }
        let values = data[p.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        params
            .insert(p.name.clone(), Tensor::from_vec(p.shape[0], p.shape[1], values))
            .map_err(|e| err(e.to_string()))?;
        expected_offset = end;
    }
    if expected_offset != data.len() {
        return Err(err(format!("{} trailing bytes", data.len() - expected_offset)));
    }
    Ok(Checkpoint { kind: manifest.kind, stage: manifest.stage, meta: manifest.meta, params })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = to_bytes(ckpt)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
