//! `RFCK` checkpoint container.
//!
//! Layout, all integers little-endian `u32`: magic `RFCK`, version,
//! generator base channels, residual blocks, discriminator base channels,
//! tensor count, then per tensor: name length, UTF-8 name, rank (always 4),
//! four dims, and the `f32` payload.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::config::{DiscriminatorConfig, GeneratorConfig};
use super::CycleGanModel;
use crate::autodiff::Tensor;

pub const MAGIC: &[u8; 4] = b"RFCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {0} is not supported (expected {VERSION})")]
    VersionMismatch(u32),
    #[error("checkpoint ends inside a record")]
    TruncatedRecord,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn put(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_checkpoint(model: &CycleGanModel) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    put(&mut out, model.gen_cfg.base_channels);
    put(&mut out, model.gen_cfg.n_res_blocks);
    put(&mut out, model.disc_cfg.base_channels);
    let params: Vec<_> = model.networks().into_iter().flat_map(|n| &n.params).collect();
    put(&mut out, params.len());
    for p in params {
        put(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        put(&mut out, 4);
        for d in p.tensor.shape() {
            put(&mut out, d);
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::TruncatedRecord)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::TruncatedRecord)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parses a checkpoint completely before building the model, so a damaged
/// file never yields a partial model.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<CycleGanModel, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch(version));
    }
    let gen_cfg = GeneratorConfig {
        base_channels: r.u32()?,
        n_res_blocks: r.u32()?,
        ..GeneratorConfig::desk()
    };
    let disc_cfg = DiscriminatorConfig {
        base_channels: r.u32()?,
        ..DiscriminatorConfig::desk()
    };
    let count = r.u32()?;
    let mut records = Vec::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        if r.u32()? != 4 {
            return Err(CheckpointError::Malformed(format!("tensor {name} is not rank 4")));
        }
        let shape = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| CheckpointError::Malformed(format!("tensor {name} is too large")))?;
        let payload = r.take(n.checked_mul(4).ok_or(CheckpointError::TruncatedRecord)?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(format!("tensor {name}: {e}")))?;
        records.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed("trailing bytes after last record".into()));
    }
    let mut model = CycleGanModel::build(gen_cfg, disc_cfg, 0)
        .map_err(|e| CheckpointError::Malformed(format!("stored config is invalid: {e}")))?;
    let params: Vec<_> = model.networks_mut().into_iter().flat_map(|n| n.params.iter_mut()).collect();
    if params.len() != records.len() {
        return Err(CheckpointError::Malformed(format!(
            "expected {} tensors, found {}",
            params.len(),
            records.len()
        )));
    }
    for (p, (name, tensor)) in params.into_iter().zip(records) {
        if p.name != name || p.tensor.shape() != tensor.shape() {
            return Err(CheckpointError::Malformed(format!(
                "record {name} {:?} does not match {} {:?}",
                tensor.shape(),
                p.name,
                p.tensor.shape()
            )));
        }
        p.tensor = tensor;
    }
    Ok(model)
}

pub fn save_checkpoint(model: &CycleGanModel, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CycleGanModel, CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
