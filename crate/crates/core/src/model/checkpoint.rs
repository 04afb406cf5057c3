//! Binary checkpoint format.
//!
//! Little-endian layout:
//!
//! ```text
//! "AVCK"  u32 version = 1
//! u32 config_len, config JSON (UTF-8)
//! u32 param_count
//! per param: u16 name_len, name (UTF-8), u8 rank, u32 dims[rank], f32 data
//! ```

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::{ModelConfig, ParameterSet};
use crate::autodiff::Tensor;
use crate::binio::{put_f32s, put_u16, put_u32, ByteReader};

pub const MAGIC: &[u8; 4] = b"AVCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    VersionMismatch(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("shape inconsistency: {0}")]
    ShapeInconsistency(String),
    #[error("invalid checkpoint config: {0}")]
    Config(String),
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_checkpoint(params: &ParameterSet, config: &ModelConfig) -> Result<Vec<u8>, CheckpointError> {
    params
        .check_against(config)
        .map_err(CheckpointError::ShapeInconsistency)?;
    let mut out = Vec::with_capacity(64 + params.num_values() * 4);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION)?;
    let json = serde_json::to_vec(config).map_err(|e| CheckpointError::Config(e.to_string()))?;
    put_u32(&mut out, json.len() as u32)?;
    out.extend_from_slice(&json);
    put_u32(&mut out, params.len() as u32)?;
    for (name, t) in params.iter() {
        put_u16(&mut out, name.len() as u16)?;
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            put_u32(&mut out, d as u32)?;
        }
        put_f32s(&mut out, t.data())?;
    }
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(ParameterSet, ModelConfig), CheckpointError> {
    use CheckpointError::Truncated;
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4).ok_or(Truncated)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32().ok_or(Truncated)?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch(version));
    }
    let json_len = r.u32().ok_or(Truncated)? as usize;
    let json = r.take(json_len).ok_or(Truncated)?;
    let config: ModelConfig = serde_json::from_slice(json).map_err(|e| CheckpointError::Config(e.to_string()))?;
    config.validate().map_err(|e| CheckpointError::Config(e.to_string()))?;

    let count = r.u32().ok_or(Truncated)?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let name_len = r.u16().ok_or(Truncated)? as usize;
        let name = std::str::from_utf8(r.take(name_len).ok_or(Truncated)?)
            .map_err(|_| CheckpointError::ShapeInconsistency("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8().ok_or(Truncated)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32().ok_or(Truncated)? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::ShapeInconsistency(format!("'{name}' has an oversized shape")))?;
        let data = r.f32s(numel).ok_or(Truncated)?;
        let tensor =
            Tensor::new(shape, data).map_err(|e| CheckpointError::ShapeInconsistency(format!("'{name}': {e}")))?;
        if params.insert(name.clone(), tensor).is_some() {
            return Err(CheckpointError::ShapeInconsistency(format!(
                "duplicate parameter '{name}'"
            )));
        }
    }
    if r.remaining() != 0 {
        return Err(CheckpointError::TrailingBytes(r.remaining()));
    }
    params
        .check_against(&config)
        .map_err(CheckpointError::ShapeInconsistency)?;
    Ok((params, config))
}

pub fn save_checkpoint(
    params: &ParameterSet,
    config: &ModelConfig,
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    let bytes = write_checkpoint(params, config)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ParameterSet, ModelConfig), CheckpointError> {
    let bytes = fs::read(path)?;
    read_checkpoint(&bytes)
}
