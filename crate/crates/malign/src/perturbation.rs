//! `MALNPERT` perturbation sets: the attack fingerprint, the models the
//! perturbation was generated on, the pool sample ids, and the raw deltas.

use std::path::Path;

use malign_core::attacks::Fingerprint;
use malign_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MALNPERT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationManifest {
    pub format: u32,
    pub fingerprint: Fingerprint,
    pub model_ids: Vec<String>,
    pub sample_ids: Vec<usize>,
    /// `[n, ...sample shape]`.
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSet {
    pub manifest: PerturbationManifest,
    pub delta: Tensor,
}

impl PerturbationSet {
    pub fn new(fingerprint: Fingerprint, model_ids: Vec<String>, sample_ids: Vec<usize>, delta: Tensor) -> Result<Self> {
        if delta.rank() == 0 || delta.shape()[0] != sample_ids.len() {
            return Err(Error::Manifest(format!(
                "{} sample ids for a delta of shape {:?}",
                sample_ids.len(),
                delta.shape()
            )));
        }
        Ok(Self {
            manifest: PerturbationManifest {
                format: 1,
                fingerprint,
                model_ids,
                sample_ids,
                shape: delta.shape().to_vec(),
            },
            delta,
        })
    }
}

pub fn save_perturbations(set: &PerturbationSet, path: &Path) -> Result<()> {
    container::write(path, MAGIC, &set.manifest, set.delta.data())
}

pub fn load_perturbations(path: &Path) -> Result<PerturbationSet> {
    let raw = container::read::<PerturbationManifest>(path, MAGIC)?;
    let man = raw.manifest;
    if man.shape.first() != Some(&man.sample_ids.len()) {
        return Err(Error::Header {
            path: path.into(),
            reason: format!("shape {:?} does not match {} sample ids", man.shape, man.sample_ids.len()),
        });
    }
    let values = container::decode(path, &raw.blob, man.shape.iter().product())?;
    let delta = Tensor::new(man.shape.clone(), values)?;
    Ok(PerturbationSet { manifest: man, delta })
}
