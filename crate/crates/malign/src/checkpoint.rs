//! `MALNCKPT` model checkpoints. The manifest carries the full layer stack,
//! so loading needs nothing else.

use std::path::Path;

use malign_core::{LayerSpec, Model, NamedTensor, Tensor};
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MALNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in values (not bytes).
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub arch_id: String,
    pub init_seed: u64,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<ParamEntry>,
    /// Free-form training provenance (configs, data description, parents).
    #[serde(default)]
    pub provenance: serde_json::Value,
}

pub fn manifest_for(model: &Model, provenance: serde_json::Value) -> CheckpointManifest {
    let mut offset = 0;
    let params = model
        .params()
        .iter()
        .map(|p| {
            let e = ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
            };
            offset += p.value.len();
            e
        })
        .collect();
    CheckpointManifest {
        format: FORMAT_VERSION,
        arch_id: model.arch_id.clone(),
        init_seed: model.init_seed,
        input_shape: model.input_shape().to_vec(),
        layers: model.layers().to_vec(),
        params,
        provenance,
    }
}

pub fn save_checkpoint(model: &Model, path: &Path, provenance: serde_json::Value) -> Result<()> {
    let values: Vec<f64> = model.params().iter().flat_map(|p| p.value.data().iter().copied()).collect();
    container::write(path, MAGIC, &manifest_for(model, provenance), &values)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    load_checkpoint_with_manifest(path).map(|(m, _)| m)
}

pub fn load_checkpoint_with_manifest(path: &Path) -> Result<(Model, CheckpointManifest)> {
    let raw = container::read::<CheckpointManifest>(path, MAGIC)?;
    let man = raw.manifest;
    if man.format != FORMAT_VERSION {
        return Err(Error::Header {
            path: path.into(),
            reason: format!("unsupported format version {}", man.format),
        });
    }
    // The architecture decides the shapes; the manifest must agree with it.
    let skeleton = Model::zeroed(man.layers.clone(), man.input_shape.clone(), man.arch_id.clone(), man.init_seed)
        .map_err(|e| Error::Header {
            path: path.into(),
            reason: e.to_string(),
        })?;
    if skeleton.params().len() != man.params.len() {
        return Err(Error::Header {
            path: path.into(),
            reason: format!(
                "architecture has {} parameter tensors, manifest lists {}",
                skeleton.params().len(),
                man.params.len()
            ),
        });
    }
    let mut offset = 0;
    for (want, got) in skeleton.params().iter().zip(&man.params) {
        if want.value.shape() != got.shape.as_slice() || want.name != got.name {
            return Err(Error::ShapeMismatch {
                path: path.into(),
                name: got.name.clone(),
                expected: want.value.shape().to_vec(),
                found: got.shape.clone(),
            });
        }
        if got.offset != offset {
            return Err(Error::Header {
                path: path.into(),
                reason: format!("parameter {} at offset {}, expected {offset}", got.name, got.offset),
            });
        }
        offset += want.value.len();
    }
    let values = container::decode(path, &raw.blob, offset)?;
    let params = man
        .params
        .iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            Ok(NamedTensor {
                name: e.name.clone(),
                value: Tensor::new(e.shape.clone(), values[e.offset..e.offset + n].to_vec())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = Model::new(
        man.layers.clone(),
        man.input_shape.clone(),
        params,
        man.arch_id.clone(),
        man.init_seed,
    )?;
    Ok((model, man))
}

/// Rounds every parameter through f32, the on-disk precision. Applying
/// this right after training makes fresh and reloaded runs identical.
pub fn quantize(model: &Model) -> Model {
    let mut m = model.clone();
    for p in m.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
    m
}
