//! Binary checkpoint serialization.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "ARSC" | u32 version = 1 | u32 tensor count
//! per tensor: u16 name length | UTF-8 name | u8 rank | rank x u32 dims
//!             | product(dims) x f32 values
//! trailing u32 CRC32 (IEEE) of all preceding bytes
//! ```
//!
//! Tensors are written in sorted name order, so save -> load -> save is
//! byte-identical. Trainable flags are not serialized; loaded parameters
//! come back trainable and callers freeze what the regime requires.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::ModelConfig;
use crate::tensor::{ParamSet, Parameter, Tensor};

const MAGIC: &[u8; 4] = b"ARSC";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("crc mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("invalid tensor record: {0}")]
    BadRecord(String),
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("checkpoint holds unknown tensor `{0}`")]
    UnknownTensor(String),
    #[error("tensor `{name}` has shape {actual:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        actual: Vec<usize>,
        expected: Vec<usize>,
    },
}

fn crc32(bytes: &[u8]) -> u32 {
    // IEEE polynomial, reflected, table-driven.
    let mut table = [0u32; 256];
    for (i, entry) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *entry = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

/// Serialized form of a parameter set, without the trailing file write.
pub fn checkpoint_bytes(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        let name = p.name().as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        let shape = p.value().shape();
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn save_checkpoint(params: &ParamSet, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    fs::write(path, checkpoint_bytes(params))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamSet, CheckpointError> {
    parse_checkpoint(&fs::read(path)?)
}

fn parse_checkpoint(bytes: &[u8]) -> Result<ParamSet, CheckpointError> {
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated);
    }
    if &bytes[0..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32(body);
    if stored != computed {
        return Err(CheckpointError::CrcMismatch { stored, computed });
    }

    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut pos = 12;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
        if *pos + n > body.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| CheckpointError::BadRecord("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::BadRecord(e.to_string()))?;
        params
            .insert(Parameter::new(name.clone(), tensor, true))
            .map_err(|_| CheckpointError::BadRecord(format!("duplicate tensor `{name}`")))?;
    }
    if pos != body.len() {
        return Err(CheckpointError::BadRecord(
            "trailing bytes after last tensor".into(),
        ));
    }
    Ok(params)
}

/// Checks a loaded parameter set against the tensors a configuration
/// expects: no missing names, no unknown names, no shape drift.
pub fn validate_params(cfg: &ModelConfig, params: &ParamSet) -> Result<(), CheckpointError> {
    let expected = cfg.tensor_shapes();
    for (name, shape) in &expected {
        match params.get(name) {
            None => return Err(CheckpointError::MissingTensor(name.clone())),
            Some(p) if p.value().shape() != shape.as_slice() => {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    actual: p.value().shape().to_vec(),
                    expected: shape.clone(),
                })
            }
            Some(_) => {}
        }
    }
    for p in params.iter() {
        if !expected.contains_key(p.name()) {
            return Err(CheckpointError::UnknownTensor(p.name().to_string()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            mel_bins: 6,
            conv1_channels: 3,
            conv1_kernel: 3,
            conv1_stride: 1,
            conv2_channels: 4,
            conv2_kernel: 3,
            conv2_stride: 1,
            gru_hidden: 4,
            attention_dim: 3,
            num_source_classes: 2,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let cfg = small_cfg();
        let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(params.len(), loaded.len());
        for (a, b) in params.iter().zip(loaded.iter()) {
            assert_eq!(a.name(), b.name());
            assert_eq!(a.value().shape(), b.value().shape());
            for (x, y) in a.value().data().iter().zip(b.value().data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // Save of the loaded set reproduces the same bytes.
        assert_eq!(checkpoint_bytes(&params), checkpoint_bytes(&loaded));
    }

    #[test]
    fn corrupt_magic_detected() {
        let cfg = small_cfg();
        let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut bytes = checkpoint_bytes(&params);
        bytes[0] = b'X';
        assert!(matches!(
            parse_checkpoint(&bytes),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn corrupt_body_fails_crc() {
        let cfg = small_cfg();
        let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut bytes = checkpoint_bytes(&params);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            parse_checkpoint(&bytes),
            Err(CheckpointError::CrcMismatch { .. })
        ));
    }

    #[test]
    fn truncated_file_detected() {
        let cfg = small_cfg();
        let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut bytes = checkpoint_bytes(&params);
        bytes.truncate(bytes.len() - 9);
        assert!(parse_checkpoint(&bytes).is_err());
    }

    #[test]
    fn missing_tensor_named_in_error() {
        let cfg = small_cfg();
        let mut params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        params.remove("attn.v").unwrap();
        match validate_params(&cfg, &params) {
            Err(CheckpointError::MissingTensor(name)) => assert_eq!(name, "attn.v"),
            other => panic!("expected MissingTensor, got {other:?}"),
        }
    }

    #[test]
    fn unknown_tensor_named_in_error() {
        let cfg = small_cfg();
        let mut params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        params
            .insert(Parameter::new("rogue", Tensor::scalar(1.0), true))
            .unwrap();
        match validate_params(&cfg, &params) {
            Err(CheckpointError::UnknownTensor(name)) => assert_eq!(name, "rogue"),
            other => panic!("expected UnknownTensor, got {other:?}"),
        }
    }

    #[test]
    fn unsupported_version_detected() {
        let cfg = small_cfg();
        let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut bytes = checkpoint_bytes(&params);
        bytes[4] = 9;
        // CRC still matches the original body, so re-stamp it.
        let body_len = bytes.len() - 4;
        let crc = super::crc32(&bytes[..body_len]).to_le_bytes();
        bytes[body_len..].copy_from_slice(&crc);
        assert!(matches!(
            parse_checkpoint(&bytes),
            Err(CheckpointError::UnsupportedVersion(9))
        ));
    }
}
