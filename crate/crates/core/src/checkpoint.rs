//! Portable checkpoints: a JSON manifest plus one raw little-endian `f32`
//! file per tensor, each guarded by a CRC-32.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Preset};
use crate::params::ParamStore;
use crate::phantom::{f32_to_le, le_to_f32, read_file, write_file};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: &str = "cimt-checkpoint/1";
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub bytes: usize,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: String,
    pub preset: Preset,
    pub config_hash: String,
    pub model: ModelConfig,
    /// Free-form metadata (operating threshold, training summary, ...).
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// A manifest together with its tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub preset: Preset,
    pub config_hash: String,
    pub model: ModelConfig,
    pub meta: serde_json::Value,
    pub tensors: ParamStore<f32>,
}

fn file_name(tensor: &str) -> String {
    let safe: String = tensor
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{safe}.bin")
}

pub fn save_checkpoint(ck: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::with_capacity(ck.tensors.len());
    for (name, t) in ck.tensors.iter() {
        let bytes = f32_to_le(t.data());
        let file = file_name(name);
        write_file(&dir.join(&file), &bytes)?;
        tensors.push(TensorEntry {
            name: name.to_string(),
            dtype: "f32".to_string(),
            shape: t.shape().to_vec(),
            file,
            bytes: bytes.len(),
            crc32: crc32fast::hash(&bytes),
        });
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION.to_string(),
        preset: ck.preset,
        config_hash: ck.config_hash.clone(),
        model: ck.model.clone(),
        meta: ck.meta.clone(),
        tensors,
    };
    let path = dir.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    text.push('\n');
    write_file(&path, text.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = read_file(&path)?;
    let manifest: Manifest = serde_json::from_slice(&text).map_err(|e| Error::json(&path, e))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported checkpoint version `{}`",
            path.display(),
            manifest.version
        )));
    }
    Ok(manifest)
}

/// Loads and verifies every tensor file against the manifest.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let mut tensors = ParamStore::new();
    for e in &manifest.tensors {
        let path = dir.join(&e.file);
        if e.dtype != "f32" {
            return Err(Error::Checkpoint(format!("{}: unsupported dtype `{}`", path.display(), e.dtype)));
        }
        let bytes = read_file(&path)?;
        let numel: usize = e.shape.iter().product();
        if bytes.len() != e.bytes || bytes.len() != 4 * numel {
            return Err(Error::Checkpoint(format!(
                "{}: expected {} bytes for shape {:?}, found {}",
                path.display(),
                4 * numel,
                e.shape,
                bytes.len()
            )));
        }
        let crc = crc32fast::hash(&bytes);
        if crc != e.crc32 {
            return Err(Error::Checkpoint(format!(
                "{}: checksum {crc:08x} does not match manifest {:08x}",
                path.display(),
                e.crc32
            )));
        }
        tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), le_to_f32(&bytes))?);
    }
    Ok(Checkpoint {
        preset: manifest.preset,
        config_hash: manifest.config_hash,
        model: manifest.model,
        meta: manifest.meta,
        tensors,
    })
}
