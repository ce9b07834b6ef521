//! Checkpoint container: a JSON manifest plus one little-endian `f32` blob.
//!
//! ```text
//! <dir>/manifest.json   {"format", "meta", "tensors": [{"name", "shape", "offset"}]}
//! <dir>/tensors.bin     row-major f32 LE, concatenated in manifest order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::store::ParameterStore;
use crate::tensor::Tensor;

pub const FORMAT: &str = "ndtensor-checkpoint-v1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode(store: &ParameterStore<f32>, meta: serde_json::Value) -> (Manifest, Vec<u8>) {
    let mut blob = Vec::with_capacity(store.num_elements() * 4);
    let mut tensors = Vec::with_capacity(store.len());
    for (name, p) in store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for &x in p.value.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        meta,
        tensors,
    };
    (manifest, blob)
}

pub fn decode(manifest: &Manifest, blob: &[u8]) -> Result<ParameterStore<f32>> {
    if manifest.format != FORMAT {
        return Err(TensorError::Checkpoint(format!("unsupported format `{}`", manifest.format)));
    }
    let mut store = ParameterStore::new();
    let mut expected_offset = 0u64;
    for e in &manifest.tensors {
        if e.offset != expected_offset {
            return Err(TensorError::Checkpoint(format!(
                "tensor `{}` at offset {} (expected {expected_offset})",
                e.name, e.offset
            )));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 4 * n;
        let bytes = blob.get(start..end).ok_or_else(|| {
            TensorError::Checkpoint(format!("blob truncated while reading `{}`", e.name))
        })?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
        expected_offset = end as u64;
    }
    if expected_offset as usize != blob.len() {
        return Err(TensorError::Checkpoint(format!(
            "blob has {} trailing bytes",
            blob.len() - expected_offset as usize
        )));
    }
    Ok(store)
}

pub fn save(dir: &Path, store: &ParameterStore<f32>, meta: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (manifest, blob) = encode(store, meta);
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<(ParameterStore<f32>, serde_json::Value)> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    let store = decode(&manifest, &blob)?;
    Ok((store, manifest.meta))
}
