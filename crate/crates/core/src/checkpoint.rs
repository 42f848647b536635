//! Versioned binary checkpoints: named parameter tensors with shape
//! metadata plus a free-form JSON header.
//!
//! Values are stored as raw little-endian bit patterns, so a save/load
//! round trip is bit-exact at either precision. Loading checks the magic,
//! version, and element width.

use crate::real::Real;
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"SLRCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: precision mismatch: file has {file} bits, expected {expected}")]
    Precision {
        path: String,
        file: u32,
        expected: u32,
    },
    #[error("{path}: truncated or corrupt checkpoint")]
    Corrupt { path: String },
    #[error("{path}: bad metadata: {reason}")]
    Meta { path: String, reason: String },
}

/// In-memory checkpoint: metadata plus named tensors.
pub struct Checkpoint<F: Real> {
    pub meta: serde_json::Value,
    pub tensors: HashMap<String, Tensor<F>>,
}

pub fn save<F: Real>(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &[(String, Tensor<F>)],
) -> Result<(), CheckpointError> {
    let pstr = path.display().to_string();
    let io = |source| CheckpointError::Io {
        path: pstr.clone(),
        source,
    };
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&F::BITS.to_le_bytes());
    let meta_bytes = serde_json::to_vec(meta).expect("serializable meta");
    buf.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_bytes);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut buf);
        }
    }
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&buf).map_err(|source| CheckpointError::Io {
        path: pstr.clone(),
        source,
    })?;
    Ok(())
}

pub fn load<F: Real>(path: &Path) -> Result<Checkpoint<F>, CheckpointError> {
    let pstr = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| CheckpointError::Io {
            path: pstr.clone(),
            source,
        })?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
        if *pos + n > bytes.len() {
            return Err(CheckpointError::Corrupt { path: pstr.clone() });
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 8)? != MAGIC {
        return Err(CheckpointError::BadMagic { path: pstr });
    }
    let bits = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if bits != F::BITS {
        return Err(CheckpointError::Precision {
            path: pstr,
            file: bits,
            expected: F::BITS,
        });
    }
    let meta_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let meta: serde_json::Value =
        serde_json::from_slice(take(&mut pos, meta_len)?).map_err(|e| CheckpointError::Meta {
            path: pstr.clone(),
            reason: e.to_string(),
        })?;
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let elem = (F::BITS / 8) as usize;
    let mut tensors = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec()).map_err(|_| {
            CheckpointError::Corrupt { path: pstr.clone() }
        })?;
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * elem)?;
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            data.push(F::read_le(&raw[i * elem..]));
        }
        tensors.insert(name, Tensor::from_vec(&shape, data));
    }
    Ok(Checkpoint { meta, tensors })
}
