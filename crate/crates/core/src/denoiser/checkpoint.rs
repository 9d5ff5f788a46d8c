//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! [0..8)    magic  b"DDCKPT01"
//! [8..16)   u64    header length H in bytes
//! [16..16+H)       UTF-8 JSON header {format_version, timesteps, config, tensors, num_values}
//! [16+H..)         num_values f64 values, little-endian, flat layout order
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DenoiserConfig, DenoiserParams};

const MAGIC: &[u8; 8] = b"DDCKPT01";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    timesteps: usize,
    config: DenoiserConfig,
    tensors: Vec<TensorInfo>,
    num_values: usize,
}

pub fn write_checkpoint<W: Write>(params: &DenoiserParams, mut out: W) -> Result<(), CheckpointError> {
    let header = Header {
        format_version: FORMAT_VERSION,
        timesteps: params.timesteps(),
        config: params.config().clone(),
        tensors: params.tensor_infos(),
        num_values: params.num_values(),
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    let mut body = Vec::with_capacity(8 * params.num_values());
    for v in params.as_slice() {
        body.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&body)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<DenoiserParams, CheckpointError> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Format(format!(
            "unsupported version {}",
            header.format_version
        )));
    }

    let mut params = DenoiserParams::zeros(header.config, header.timesteps);
    if params.tensor_infos() != header.tensors || params.num_values() != header.num_values {
        return Err(CheckpointError::Format(
            "tensor table does not match the declared config".into(),
        ));
    }
    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    if body.len() != 8 * header.num_values {
        return Err(CheckpointError::Format(format!(
            "expected {} value bytes, found {}",
            8 * header.num_values,
            body.len()
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    params
        .set_values(values)
        .map_err(|e| CheckpointError::Format(e.to_string()))?;
    Ok(params)
}
