//! Versioned checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "CIRKCKPT"
//! version   u32
//! hlen      u64      length of the JSON header
//! header    hlen bytes
//! tensors   float32 values, in header order
//! digest    32 bytes SHA-256 of everything above
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{create_backend, BackendConfig};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::fusion::FusionParams;
use crate::model::CirModel;

use super::TrainConfig;

pub const MAGIC: &[u8; 8] = b"CIRKCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    backend: BackendConfig,
    normalize_features: bool,
    epoch: usize,
    rng_state: String,
    fusion_dim: usize,
    fusion_hidden: usize,
    tensors: Vec<TensorEntry>,
}

/// Trained state: fusion head, optional backbone weights, and the run's
/// configuration. Tensors are held as float32, exactly as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub backend: BackendConfig,
    pub normalize_features: bool,
    pub epoch: usize,
    /// Shuffle stream position: `"<seed>:<next epoch>"`.
    pub rng_state: String,
    pub fusion_dim: usize,
    pub fusion_hidden: usize,
    pub tensors: Vec<(TensorEntry, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_model(model: &CirModel, config: &TrainConfig, epoch: usize) -> Self {
        let mut tensors = Vec::new();
        let f = &model.fusion;
        for ((name, shape), values) in FusionParams::NAMES.iter().zip(f.shapes()).zip(f.slices()) {
            tensors.push((
                TensorEntry {
                    name: name.to_string(),
                    shape,
                },
                values.iter().map(|&x| x as f32).collect(),
            ));
        }
        if let Some(bb) = model.backend.backbone() {
            for (name, values) in bb.parameter_names().into_iter().zip(bb.parameters()) {
                tensors.push((
                    TensorEntry {
                        name: format!("backbone.{name}"),
                        shape: vec![values.len()],
                    },
                    values.iter().map(|&x| x as f32).collect(),
                ));
            }
        }
        Self {
            config: config.clone(),
            backend: model.backend_config.clone(),
            normalize_features: model.normalize_features,
            epoch,
            rng_state: format!("{}:{}", config.seed, epoch),
            fusion_dim: f.dim,
            fusion_hidden: f.hidden,
            tensors,
        }
    }

    fn tensor(&self, name: &str) -> Option<&[f32]> {
        self.tensors
            .iter()
            .find(|(e, _)| e.name == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn fusion_params(&self) -> Result<FusionParams> {
        let mut p = FusionParams::zeros(self.fusion_dim, self.fusion_hidden);
        for (name, dst) in FusionParams::NAMES.iter().zip(p.slices_mut()) {
            let src = self
                .tensor(name)
                .ok_or_else(|| Error::CheckpointCorrupt(format!("missing tensor {name}")))?;
            if src.len() != dst.len() {
                return Err(Error::CheckpointIncompatible(format!(
                    "tensor {name} has {} values, expected {}",
                    src.len(),
                    dst.len()
                )));
            }
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *s as f64;
            }
        }
        p.validate()?;
        Ok(p)
    }

    /// Rebuilds the model. Backbone tensors overwrite the freshly created
    /// backend's weights.
    pub fn to_model(&self) -> Result<CirModel> {
        let mut backend = create_backend(&self.backend)?;
        if backend.dim() != self.fusion_dim {
            return Err(Error::CheckpointIncompatible(format!(
                "backend dim {} but fusion head expects {}",
                backend.dim(),
                self.fusion_dim
            )));
        }
        let has_backbone_tensors = self.tensors.iter().any(|(e, _)| e.name.starts_with("backbone."));
        match backend.backbone_mut() {
            Some(bb) => {
                let names = bb.parameter_names();
                for (name, dst) in names.iter().zip(bb.parameters_mut()) {
                    let key = format!("backbone.{name}");
                    let src = self.tensor(&key).ok_or_else(|| {
                        Error::CheckpointIncompatible(format!("checkpoint lacks {key}"))
                    })?;
                    if src.len() != dst.len() {
                        return Err(Error::CheckpointIncompatible(format!(
                            "{key} has {} values, backend expects {}",
                            src.len(),
                            dst.len()
                        )));
                    }
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = *s as f64;
                    }
                }
            }
            None if has_backbone_tensors => {
                return Err(Error::CheckpointIncompatible(format!(
                    "backend {} has no trainable weights but the checkpoint carries some",
                    self.backend.name
                )))
            }
            None => {}
        }
        Ok(CirModel {
            backend_config: self.backend.clone(),
            backend,
            fusion: self.fusion_params()?,
            normalize_features: self.normalize_features,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            backend: self.backend.clone(),
            normalize_features: self.normalize_features,
            epoch: self.epoch,
            rng_state: self.rng_state.clone(),
            fusion_dim: self.fusion_dim,
            fusion_hidden: self.fusion_hidden,
            tensors: self.tensors.iter().map(|(e, _)| e.clone()).collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let total: usize = self.tensors.iter().map(|(_, v)| v.len()).sum();
        let mut buf = Vec::with_capacity(20 + header.len() + 4 * total + 32);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for (entry, values) in &self.tensors {
            if values.len() != entry.numel() {
                return Err(Error::Shape(format!("tensor {} does not match its shape", entry.name)));
            }
            for x in values {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CheckpointCorrupt(m.to_string());
        if bytes.len() < 20 + 32 {
            return Err(corrupt("file is truncated"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::CheckpointIncompatible(format!(
                "file version {version}, this build reads version {VERSION}"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or modified file)"));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| corrupt("header length exceeds file size"))?;
        let header: Header = serde_json::from_slice(&body[20..header_end])
            .map_err(|e| Error::CheckpointCorrupt(format!("header: {e}")))?;
        let mut data = &body[header_end..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n = entry.numel();
            if data.len() < 4 * n {
                return Err(corrupt("tensor data is shorter than the manifest"));
            }
            let (chunk, rest) = data.split_at(4 * n);
            let values = chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((entry, values));
            data = rest;
        }
        if !data.is_empty() {
            return Err(corrupt("trailing bytes after tensor data"));
        }
        Ok(Self {
            config: header.config,
            backend: header.backend,
            normalize_features: header.normalize_features,
            epoch: header.epoch,
            rng_state: header.rng_state,
            fusion_dim: header.fusion_dim,
            fusion_hidden: header.fusion_hidden,
            tensors,
        })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    write_atomic(path, &checkpoint.to_bytes()?)
}

/// Reads a checkpoint; with `expected_dim`, a different embedding size is an
/// incompatibility error.
pub fn load_checkpoint(path: &Path, expected_dim: Option<usize>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    if let Some(d) = expected_dim {
        if d != ckpt.fusion_dim {
            return Err(Error::CheckpointIncompatible(format!(
                "{}: checkpoint has D={} but the configuration asks for D={d}",
                path.display(),
                ckpt.fusion_dim
            )));
        }
    }
    Ok(ckpt)
}
