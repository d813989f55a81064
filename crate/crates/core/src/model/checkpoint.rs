//! Checkpoints: a JSON manifest next to a blob of `f64` tensor records
//! (parameters first, then momentum buffers, in manifest order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, ModelState};
use crate::data::io::{blob_path, decode_record, encode_record, RecordData};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    param_offset: u64,
    momentum_offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    arch: ArchConfig,
    step: u64,
    epoch: u64,
    tensors: Vec<TensorEntry>,
}

/// Writes `path` (manifest) and its sibling `.bin` blob.
pub fn save(state: &ModelState, path: &Path) -> Result<()> {
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(state.params().len());
    for (name, p) in state.names().iter().zip(state.params()) {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: [p.rows(), p.cols()],
            param_offset: blob.len() as u64,
            momentum_offset: 0,
        });
        encode_record(&mut blob, &[p.rows(), p.cols()], &RecordData::F64(p.data().to_vec()));
    }
    for (entry, m) in tensors.iter_mut().zip(state.momentum()) {
        entry.momentum_offset = blob.len() as u64;
        encode_record(&mut blob, &[m.rows(), m.cols()], &RecordData::F64(m.data().to_vec()));
    }
    let manifest = CheckpointManifest {
        arch: state.arch().clone(),
        step: state.step,
        epoch: state.epoch,
        tensors,
    };
    let blob_file = blob_path(path);
    fs::write(&blob_file, blob).map_err(|e| Error::io(&blob_file, e))?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelState> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let blob_file = blob_path(path);
    let blob = fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
    let read = |offset: u64, shape: [usize; 2]| -> Result<Matrix> {
        let (dims, data, _) = decode_record(&blob, offset as usize)?;
        let RecordData::F64(values) = data else {
            return Err(Error::MalformedBlob("checkpoint tensors must be f64".into()));
        };
        if dims != shape {
            return Err(Error::DimensionMismatch(format!("{dims:?} vs manifest {shape:?}")));
        }
        Matrix::new(shape[0], shape[1], values)
    };
    let named = manifest
        .tensors
        .iter()
        .map(|t| Ok((t.name.clone(), read(t.param_offset, t.shape)?, read(t.momentum_offset, t.shape)?)))
        .collect::<Result<Vec<_>>>()?;
    ModelState::from_parts(manifest.arch, named, manifest.step, manifest.epoch)
}
