//! Single-file checkpoints: one line of JSON manifest, a newline, then every
//! tensor as little-endian `f32` in manifest order. Offsets and lengths in
//! the manifest are byte counts into the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

impl Model {
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        for (name, t) in self.params.iter() {
            let offset = payload.len();
            for v in t.data() {
                payload.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                len: payload.len() - offset,
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            tensors,
        };
        let mut out = serde_json::to_vec(&manifest)?;
        out.push(b'\n');
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| Error::Checkpoint("no manifest terminator".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[..split])?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let payload = &bytes[split + 1..];
        let expected: usize = manifest.tensors.iter().map(|t| t.offset + t.len).max().unwrap_or(0);
        if payload.len() != expected {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes but the manifest describes {expected}",
                payload.len()
            )));
        }
        let mut model = Model::build(manifest.config)?;
        let mut seen = 0;
        for entry in &manifest.tensors {
            let count: usize = entry.shape.iter().product();
            if entry.len != 4 * count {
                return Err(Error::Checkpoint(format!(
                    "`{}` has shape {:?} ({} bytes) but length {}",
                    entry.name,
                    entry.shape,
                    4 * count,
                    entry.len
                )));
            }
            let raw = &payload[entry.offset..entry.offset + entry.len];
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            model
                .params
                .set(&entry.name, Tensor::new(entry.shape.clone(), data)?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            seen += 1;
        }
        let declared = model.params.iter().count();
        if seen != declared {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {seen} tensors but the model declares {declared}"
            )));
        }
        Ok(model)
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = model.to_checkpoint_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Model::from_checkpoint_bytes(&bytes)
}
