//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"PNCK"            magic
//! u32                format version
//! u64                header length in bytes
//! [u8; header len]   UTF-8 JSON header: version, seed, encoder config, tensor index
//! f32 * n            tensor values, concatenated in header order
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, EncoderError, ParamSet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PNCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("corrupt checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    seed: u64,
    config: EncoderConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub encoder: Encoder,
}

impl Checkpoint {
    pub fn new(encoder: Encoder, seed: u64) -> Self {
        Checkpoint { seed, encoder }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: FORMAT_VERSION,
            seed: self.seed,
            config: self.encoder.config.clone(),
            tensors: self
                .encoder
                .params
                .iter()
                .map(|(name, p)| TensorEntry {
                    name: name.to_string(),
                    shape: p.tensor.shape().to_vec(),
                    trainable: p.trainable,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.encoder.params.num_values());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in self.encoder.params.iter() {
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        read_exact(&mut bytes, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut word = [0u8; 4];
        read_exact(&mut bytes, &mut word, "version")?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mut long = [0u8; 8];
        read_exact(&mut bytes, &mut long, "header length")?;
        let len = u64::from_le_bytes(long) as usize;
        if len > bytes.len() {
            return Err(CheckpointError::Truncated("header".into()));
        }
        let (json, mut rest) = bytes.split_at(len);
        let header: Header = serde_json::from_slice(json)?;
        if header.format_version != version {
            return Err(CheckpointError::Version(header.format_version));
        }
        let mut params = ParamSet::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let mut raw = vec![0u8; 4 * n];
            read_exact(&mut rest, &mut raw, &entry.name)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let tensor = Tensor::new(entry.shape, data).map_err(EncoderError::from)?;
            params.insert(entry.name, tensor, entry.trainable);
        }
        if !rest.is_empty() {
            return Err(CheckpointError::Truncated(format!("{} trailing bytes", rest.len())));
        }
        let encoder = Encoder::from_parts(header.config, params)?;
        Ok(Checkpoint { seed: header.seed, encoder })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = fs::read(path)
            .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(src: &mut &[u8], buf: &mut [u8], what: &str) -> Result<(), CheckpointError> {
    src.read_exact(buf).map_err(|_| CheckpointError::Truncated(what.to_string()))
}
