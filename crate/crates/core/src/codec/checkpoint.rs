//! `GRNM` model checkpoints.
//!
//! ```text
//! "GRNM" | version u16 | config | tensor count u32 | tensors...
//! config: patch_size, analysis_channels, encoder_hidden[3], code_channels,
//!         synthesis_channels, decoder_hidden[4]   (u32 each)
//!         use_gdn u8 | mode u8 | iterations u16
//! tensor: rank u32 | dims u32 × rank | values f32 × Π dims
//! ```
//!
//! All multi-byte fields are little-endian; tensors follow the model's
//! parameter declaration order.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::{ArchitectureConfig, ReconstructionMode};
use super::model::{build_model, expected_shapes, CodecModel, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wire::Reader;

pub const MAGIC: &[u8; 4] = b"GRNM";

fn truncated() -> Error {
    Error::Malformed {
        what: "checkpoint",
        detail: "truncated".into(),
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn save_checkpoint(model: &CodecModel) -> Vec<u8> {
    let c = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, c.patch_size);
    put_u32(&mut out, c.analysis_channels);
    c.encoder_hidden.iter().for_each(|&v| put_u32(&mut out, v));
    put_u32(&mut out, c.code_channels);
    put_u32(&mut out, c.synthesis_channels);
    c.decoder_hidden.iter().for_each(|&v| put_u32(&mut out, v));
    out.push(c.use_gdn as u8);
    out.push(c.mode.as_u8());
    out.extend_from_slice(&(c.iterations as u16).to_le_bytes());

    let params = model.params();
    put_u32(&mut out, params.len());
    for p in params {
        put_u32(&mut out, p.tensor.rank());
        p.tensor.shape().iter().for_each(|&d| put_u32(&mut out, d));
        for &v in p.tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

fn read_config(r: &mut Reader<'_>) -> Result<ArchitectureConfig> {
    let mut next = || r.u32().map(|v| v as usize).ok_or_else(truncated);
    let patch_size = next()?;
    let analysis_channels = next()?;
    let encoder_hidden = [next()?, next()?, next()?];
    let code_channels = next()?;
    let synthesis_channels = next()?;
    let decoder_hidden = [next()?, next()?, next()?, next()?];
    let use_gdn = match r.u8().ok_or_else(truncated)? {
        0 => false,
        1 => true,
        v => {
            return Err(Error::Malformed {
                what: "checkpoint",
                detail: format!("use_gdn flag {v}"),
            })
        }
    };
    let mode = ReconstructionMode::from_u8(r.u8().ok_or_else(truncated)?)?;
    let iterations = r.u16().ok_or_else(truncated)? as usize;
    let config = ArchitectureConfig {
        patch_size,
        analysis_channels,
        encoder_hidden,
        code_channels,
        synthesis_channels,
        decoder_hidden,
        use_gdn,
        mode,
        iterations,
    };
    config.validate()?;
    Ok(config)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<CodecModel> {
    let mut r = Reader::new(bytes);
    if r.take(4).ok_or(Error::BadMagic)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u16().ok_or_else(truncated)?;
    if version != FORMAT_VERSION {
        return Err(Error::UnknownVersion(version));
    }
    let config = read_config(&mut r)?;
    let shapes = expected_shapes(&config);
    let count = r.u32().ok_or_else(truncated)? as usize;
    if count != shapes.len() {
        return Err(Error::Malformed {
            what: "checkpoint",
            detail: format!("{count} tensors, config needs {}", shapes.len()),
        });
    }

    let mut tensors = Vec::with_capacity(count);
    for want in &shapes {
        let rank = r.u32().ok_or_else(truncated)? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32().ok_or_else(truncated)? as usize);
        }
        if &shape != want {
            return Err(Error::shape("checkpoint tensor", &shape, want));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4).ok_or_else(truncated)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("chunk of 4")) as f64)
            .collect();
        tensors.push(Tensor::new(&shape, data)?);
    }
    if r.remaining() != 0 {
        return Err(Error::TrailingBytes);
    }

    // Fill a freshly built model in declaration order.
    let mut model = build_model(&config, 0)?;
    for (slot, t) in model.params_mut().into_iter().zip(tensors) {
        *slot.tensor = t;
    }
    model.validate()?;
    Ok(model)
}

/// SHA-256 of the serialized checkpoint; bitstreams record it to bind codes
/// to the model that produced them.
pub fn model_digest(checkpoint_bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(checkpoint_bytes).into()
}

pub fn write_checkpoint(model: &CodecModel, path: impl AsRef<Path>) -> Result<[u8; 32]> {
    let bytes = save_checkpoint(model);
    fs::write(path, &bytes)?;
    Ok(model_digest(&bytes))
}

/// Loads a checkpoint file, returning the model and the file's digest.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CodecModel, [u8; 32])> {
    let bytes = fs::read(path)?;
    let model = read_checkpoint(&bytes)?;
    Ok((model, model_digest(&bytes)))
}
