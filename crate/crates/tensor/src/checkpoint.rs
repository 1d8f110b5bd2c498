//! On-disk parameter format: `manifest.json` naming every tensor with its shape, dtype and
//! byte range, plus `params.bin` holding the raw little-endian values back to back.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::ModelParams;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const FORMAT: &str = "dtn-params-v1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: usize,
    pub nbytes: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub dtype: DType,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

/// Writes `params` into directory `dir` (created if needed).
pub fn save<T: Scalar>(
    params: &ModelParams<T>,
    dir: &Path,
    metadata: BTreeMap<String, serde_json::Value>,
) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        let offset = blob.len();
        for &x in t.data() {
            x.write_le(&mut blob);
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE,
            offset,
            nbytes: blob.len() - offset,
            trainable: t.requires_grad(),
        });
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        dtype: T::DTYPE,
        tensors,
        metadata,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    fs::write(dir.join(BLOB_FILE), &blob)?;
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| TensorError::Checkpoint(format!("corrupt manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(TensorError::Checkpoint(format!("unknown format {:?}", manifest.format)));
    }
    Ok(manifest)
}

/// Reads a checkpoint written by [`save`]. The stored dtype must match `T`.
pub fn load<T: Scalar>(dir: &Path) -> Result<(ModelParams<T>, Manifest)> {
    let manifest = read_manifest(dir)?;
    if manifest.dtype != T::DTYPE {
        return Err(TensorError::Checkpoint(format!(
            "checkpoint stores {:?}, requested {:?}",
            manifest.dtype,
            T::DTYPE
        )));
    }
    let blob = fs::read(dir.join(BLOB_FILE))?;
    let size = T::DTYPE.size();
    let mut params = ModelParams::new();
    for e in &manifest.tensors {
        let numel: usize = e.shape.iter().product();
        if e.dtype != T::DTYPE || e.nbytes != numel * size || e.offset + e.nbytes > blob.len() {
            return Err(TensorError::Checkpoint(format!(
                "entry {} is inconsistent with shape {:?} or blob size {}",
                e.name,
                e.shape,
                blob.len()
            )));
        }
        let data = blob[e.offset..e.offset + e.nbytes]
            .chunks_exact(size)
            .map(T::read_le)
            .collect();
        let t = Tensor::new(&e.shape, data)?.with_requires_grad(e.trainable);
        params.insert(e.name.clone(), t);
    }
    Ok((params, manifest))
}
