//! Checkpoint container: a JSON manifest followed by raw little-endian f64
//! blobs, one per named parameter, each with an FNV-1a checksum. Round trips
//! are bitwise.

use super::{TrainConfig, TrainError};
use crate::model::{ModelConfig, Param, ParamPartition, ReadModel};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_VERSION: &str = "read-ckpt-1";
const MAGIC: &[u8; 8] = b"READCKPT";

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    hash
}

fn blob_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamManifest {
    pub name: String,
    pub shape: Vec<usize>,
    pub partition: ParamPartition,
    pub checksum: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: String,
    pub variant: String,
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub step: u64,
    pub dev_metric: Option<f64>,
    pub checkpoint_id: String,
    pub params: Vec<ParamManifest>,
}

/// A model snapshot plus its manifest; independent of the live model.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    blobs: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn from_model(
        model: &ReadModel,
        train_config: Option<&TrainConfig>,
        step: u64,
        dev_metric: Option<f64>,
    ) -> Self {
        let blobs: Vec<Vec<f64>> = model.params().iter().map(|p| p.tensor.values().to_vec()).collect();
        let params: Vec<ParamManifest> = model
            .params()
            .iter()
            .zip(&blobs)
            .map(|(p, blob)| ParamManifest {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                partition: p.partition,
                checksum: format!("{:016x}", fnv1a(&blob_bytes(blob))),
            })
            .collect();
        let mut id_material = String::new();
        for p in &params {
            id_material.push_str(&p.name);
            id_material.push_str(&p.checksum);
        }
        let variant = if model.has_bias_branch { "read" } else { "vanilla" };
        Checkpoint {
            manifest: Manifest {
                format_version: CHECKPOINT_VERSION.to_string(),
                variant: variant.to_string(),
                model_config: model.config.clone(),
                train_config: train_config.cloned(),
                step,
                dev_metric,
                checkpoint_id: format!("{:016x}", fnv1a(id_material.as_bytes())),
                params,
            },
            blobs,
        }
    }

    /// Rebuild the model. Names, shapes and partitions must match the layout
    /// implied by the manifest's model config exactly.
    pub fn to_model(&self) -> Result<ReadModel, TrainError> {
        let with_bias = match self.manifest.variant.as_str() {
            "read" => true,
            "vanilla" => false,
            other => {
                return Err(TrainError::ManifestMismatch {
                    detail: format!("unknown variant {other:?}"),
                })
            }
        };
        let expected = ReadModel::expected_layout(&self.manifest.model_config, with_bias);
        if expected.len() != self.manifest.params.len() {
            return Err(TrainError::ManifestMismatch {
                detail: format!(
                    "{} parameters in manifest, layout expects {}",
                    self.manifest.params.len(),
                    expected.len()
                ),
            });
        }
        let mut params = Vec::with_capacity(expected.len());
        for ((name, shape, partition), (pm, blob)) in
            expected.into_iter().zip(self.manifest.params.iter().zip(&self.blobs))
        {
            if pm.name != name || pm.shape != shape {
                return Err(TrainError::ManifestMismatch {
                    detail: format!(
                        "parameter {} with shape {:?}; layout expects {} with shape {:?}",
                        pm.name, pm.shape, name, shape
                    ),
                });
            }
            if blob.len() != shape.iter().product::<usize>() {
                return Err(TrainError::ManifestMismatch {
                    detail: format!("blob for {} has {} values", pm.name, blob.len()),
                });
            }
            params.push(Param {
                name,
                tensor: crate::tensor::Tensor::new(shape, blob.clone()).unwrap().with_grad(),
                partition,
            });
        }
        ReadModel::from_params(self.manifest.model_config.clone(), params, with_bias)
            .map_err(TrainError::Model)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut out = BufWriter::new(File::create(path)?);
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        out.write_all(MAGIC)?;
        out.write_all(&(manifest.len() as u64).to_le_bytes())?;
        out.write_all(&manifest)?;
        for blob in &self.blobs {
            out.write_all(&blob_bytes(blob))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let mut reader = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        reader.read_exact(&mut magic).map_err(|_| TrainError::BadHeader)?;
        if &magic != MAGIC {
            return Err(TrainError::BadHeader);
        }
        let mut len_bytes = [0u8; 8];
        reader.read_exact(&mut len_bytes).map_err(|_| TrainError::BadHeader)?;
        let manifest_len = u64::from_le_bytes(len_bytes) as usize;
        let mut manifest_bytes = vec![0u8; manifest_len];
        reader
            .read_exact(&mut manifest_bytes)
            .map_err(|_| TrainError::BadHeader)?;
        let manifest: Manifest =
            serde_json::from_slice(&manifest_bytes).map_err(|e| TrainError::ManifestMismatch {
                detail: format!("manifest does not parse: {e}"),
            })?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(TrainError::VersionMismatch {
                found: manifest.format_version,
                expected: CHECKPOINT_VERSION.to_string(),
            });
        }
        let mut blobs = Vec::with_capacity(manifest.params.len());
        for pm in &manifest.params {
            let n: usize = pm.shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            reader.read_exact(&mut bytes).map_err(|_| TrainError::Truncated {
                name: pm.name.clone(),
            })?;
            if format!("{:016x}", fnv1a(&bytes)) != pm.checksum {
                return Err(TrainError::ChecksumFailure {
                    name: pm.name.clone(),
                });
            }
            let values: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            blobs.push(values);
        }
        Ok(Checkpoint { manifest, blobs })
    }
}

/// Persist a model snapshot.
pub fn save_checkpoint(
    model: &ReadModel,
    path: &Path,
    train_config: Option<&TrainConfig>,
    step: u64,
    dev_metric: Option<f64>,
) -> Result<(), TrainError> {
    Checkpoint::from_model(model, train_config, step, dev_metric).save(path)
}

/// Load a model snapshot back.
pub fn load_checkpoint(path: &Path) -> Result<ReadModel, TrainError> {
    Checkpoint::load(path)?.to_model()
}
