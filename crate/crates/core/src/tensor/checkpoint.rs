// SPDX-License-Identifier: Apache-2.0

//! Single-file checkpoints.
//!
//! ```text
//! "HDSEGCKP" | u64 LE manifest length | manifest JSON | f64 LE blobs
//! ```
//!
//! The manifest lists every tensor with its name, kind, shape and element
//! offset into the blob section, plus a free-form `meta` object (the model
//! configuration, typically).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamKind, ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HDSEGCKP";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    dtype: String,
    meta: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, ParamKind, Tensor)>,
}

impl Checkpoint {
    /// Copies every stored tensor into the same-named entry of `store`.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, _, t) in &self.tensors {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("model has no tensor named {name}")))?;
            if store.value(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = t.clone();
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: serde_json::Value) -> Result<()> {
    let mut entries = Vec::with_capacity(store.len());
    let mut blob = Vec::new();
    let mut offset = 0;
    for id in store.ids() {
        let v = store.value(id);
        entries.push(ManifestEntry {
            name: store.name(id).to_string(),
            kind: store.kind(id),
            shape: v.shape().to_vec(),
            offset,
        });
        offset += v.len();
        for x in v.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = serde_json::to_vec(&Manifest {
        format: 1,
        dtype: "f64".into(),
        meta,
        tensors: entries,
    })?;
    let mut bytes = Vec::with_capacity(16 + manifest.len() + blob.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&manifest);
    bytes.extend_from_slice(&blob);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + mlen)
        .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(body)?;
    if manifest.dtype != "f64" {
        return Err(Error::Checkpoint(format!(
            "unsupported dtype {}",
            manifest.dtype
        )));
    }
    let blob = &bytes[16 + mlen..];
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let raw = blob
            .get(e.offset * 8..(e.offset + n) * 8)
            .ok_or_else(|| Error::Checkpoint(format!("{}: blob out of range", e.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((e.name, e.kind, Tensor::new(&e.shape, data)?));
    }
    Ok(Checkpoint {
        meta: manifest.meta,
        tensors,
    })
}
