//! Parameter checkpoints: a JSON manifest next to a raw little-endian f64 blob.
//!
//! `theta.json` describes the tensors and `theta.bin` holds their values,
//! row-major and concatenated in manifest order. `offset` counts values, not
//! bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{FguError, Result};
use crate::gnn::{Backbone, ModelParams, Tensor};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub backbone: Backbone,
    pub tensors: Vec<TensorEntry>,
}

/// Path of the value blob that belongs to a manifest.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn manifest_of<T: Scalar>(params: &ModelParams<T>) -> Manifest {
    let mut offset = 0;
    let tensors = params
        .tensors()
        .iter()
        .map(|t| {
            let (r, c) = t.value.shape();
            let e = TensorEntry { name: t.name.clone(), shape: [r, c], offset };
            offset += r * c;
            e
        })
        .collect();
    Manifest { backbone: params.backbone(), tensors }
}

/// Writes `path` (manifest) and its sibling `.bin`.
pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| FguError::io(dir, e))?;
    }
    let manifest = manifest_of(params);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| FguError::json(path, e))?;
    fs::write(path, text).map_err(|e| FguError::io(path, e))?;
    let mut bytes = Vec::with_capacity(params.num_values() * 8);
    for v in params.flatten() {
        bytes.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    let blob = blob_path(path);
    fs::write(&blob, bytes).map_err(|e| FguError::io(&blob, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelParams<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| FguError::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| FguError::json(path, e))?;
    let blob = blob_path(path);
    let bytes = fs::read(&blob).map_err(|e| FguError::io(&blob, e))?;
    if bytes.len() % 8 != 0 {
        return Err(FguError::Load(format!("{}: length {} is not a multiple of 8", blob.display(), bytes.len())));
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let [r, c] = e.shape;
        let end = e.offset + r * c;
        if end > values.len() {
            return Err(FguError::Load(format!(
                "tensor {} needs values {}..{end}, blob has {}",
                e.name,
                e.offset,
                values.len()
            )));
        }
        let data = values[e.offset..end].iter().map(|&v| T::lit(v)).collect();
        tensors.push(Tensor { name: e.name.clone(), value: Matrix::from_vec(r, c, data)? });
    }
    ModelParams::from_tensors(manifest.backbone, tensors)
}
