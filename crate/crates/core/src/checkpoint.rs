//! Checkpoint container.
//!
//! Layout:
//!
//! ```text
//! b"PRCAPS1\n"                      8-byte magic
//! u32 little-endian                 header length in bytes
//! header                            UTF-8 JSON (see `Header`)
//! f64 little-endian values          every tensor, row-major, in header order
//! ```
//!
//! The header records the model configuration, the numeric policy in force
//! when the file was written, and `{name, rows, cols}` for every tensor.

use crate::model::{ModelConfig, ModelError, ModelParams};
use crate::params::{flatten, ParamTree};
use crate::policy::NumericPolicy;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"PRCAPS1\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("bad checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("tensor `{name}`: {msg}")]
    Tensor { name: String, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub model: ModelConfig,
    pub policy: NumericPolicy,
    pub seed: u64,
    pub epoch: usize,
    pub tensors: Vec<TensorInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub policy: NumericPolicy,
    pub seed: u64,
    pub epoch: usize,
    pub params: ModelParams<Array2<f64>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let leaves = flatten(&self.params);
        let header = Header {
            version: FORMAT_VERSION,
            model: self.model.clone(),
            policy: self.policy,
            seed: self.seed,
            epoch: self.epoch,
            tensors: leaves
                .iter()
                .map(|(name, _, a)| TensorInfo {
                    name: name.clone(),
                    rows: a.nrows(),
                    cols: a.ncols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("serializable header");
        let mut out = Vec::with_capacity(12 + json.len() + 8 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, a) in leaves {
            for v in a.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut pos = MAGIC.len();
        let len_bytes: [u8; 4] = bytes
            .get(pos..pos + 4)
            .ok_or(CheckpointError::Truncated)?
            .try_into()
            .expect("four bytes");
        pos += 4;
        let hlen = u32::from_le_bytes(len_bytes) as usize;
        let hbytes = bytes.get(pos..pos + hlen).ok_or(CheckpointError::Truncated)?;
        pos += hlen;
        let header: Header = serde_json::from_slice(hbytes)?;
        if header.version != FORMAT_VERSION {
            return Err(CheckpointError::Version(header.version));
        }
        // The structure comes from the configuration; values from the file.
        let mut params = ModelParams::init(&header.model, 0)?;
        let expected = flatten(&params);
        if expected.len() != header.tensors.len() {
            return Err(CheckpointError::Tensor {
                name: "*".into(),
                msg: format!("expected {} tensors, header lists {}", expected.len(), header.tensors.len()),
            });
        }
        for ((name, _, a), info) in expected.iter().zip(&header.tensors) {
            if *name != info.name || a.dim() != (info.rows, info.cols) {
                return Err(CheckpointError::Tensor {
                    name: info.name.clone(),
                    msg: format!("expected `{name}` {:?}, found {}x{}", a.dim(), info.rows, info.cols),
                });
            }
        }
        let mut err = None;
        params.visit_mut(&mut |a| {
            for v in a.iter_mut() {
                match bytes.get(pos..pos + 8) {
                    Some(b) => *v = f64::from_le_bytes(b.try_into().expect("eight bytes")),
                    None => err = Some(CheckpointError::Truncated),
                }
                pos += 8;
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if pos != bytes.len() {
            return Err(CheckpointError::Tensor {
                name: "*".into(),
                msg: format!("{} trailing bytes", bytes.len().saturating_sub(pos)),
            });
        }
        Ok(Self {
            model: header.model,
            policy: header.policy,
            seed: header.seed,
            epoch: header.epoch,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
