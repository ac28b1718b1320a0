//! Checkpoint persistence.
//!
//! Layout (bit-exact, documented in `docs/formats.md`):
//!
//! ```text
//! bytes 0..6    magic tag  b"IAMSEQ"
//! bytes 6..8    ASCII version digits, currently b"01"
//! bytes 8..16   header length as u64 little-endian
//! header        UTF-8 TOML: version, config, meta, parameter manifest
//! payload       concatenated f32 little-endian values, manifest order
//! ```
//!
//! Values are stored in 32 bits; a save/load round trip quantizes parameters
//! to f32 precision (relative error < 1e-6).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{ModelConfig, ParameterRegistry};

const MAGIC_TAG: &[u8; 6] = b"IAMSEQ";
const VERSION_DIGITS: &[u8; 2] = b"01";
const HEADER_VERSION: u32 = 1;

/// Run provenance stored alongside the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub seed: u64,
    /// Epoch this checkpoint was taken at (absent for a fresh model).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_test_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_test_accuracy: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    meta: CheckpointMeta,
    #[serde(default)]
    params: Vec<ParamRecord>,
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload region.
    offset: u64,
    /// Element count (4 bytes each).
    count: u64,
}

/// Serializes a checkpoint to its on-disk byte layout.
pub fn checkpoint_bytes(registry: &ParameterRegistry, config: &ModelConfig, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut params = Vec::with_capacity(registry.len());
    let mut payload: Vec<u8> = Vec::new();
    for (name, tensor) in registry.iter() {
        if !tensor.is_finite() {
            return Err(Error::numeric("save_checkpoint", format!("parameter {name} holds non-finite values")));
        }
        params.push(ParamRecord {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            offset: payload.len() as u64,
            count: tensor.numel() as u64,
        });
        for &v in tensor.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let header = Header {
        version: HEADER_VERSION,
        config: config.clone(),
        meta: meta.clone(),
        params,
    };
    let header_text =
        toml::to_string(&header).map_err(|e| Error::Integrity(format!("header serialization failed: {e}")))?;
    let mut out = Vec::with_capacity(16 + header_text.len() + payload.len());
    out.extend_from_slice(MAGIC_TAG);
    out.extend_from_slice(VERSION_DIGITS);
    out.extend_from_slice(&(header_text.len() as u64).to_le_bytes());
    out.extend_from_slice(header_text.as_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_checkpoint(path: &Path, registry: &ParameterRegistry, config: &ModelConfig, meta: &CheckpointMeta) -> Result<()> {
    let bytes = checkpoint_bytes(registry, config, meta)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Parses a checkpoint byte image back into its parts.
pub fn load_checkpoint_bytes(bytes: &[u8]) -> Result<(ParameterRegistry, ModelConfig, CheckpointMeta)> {
    if bytes.len() < 16 {
        return Err(Error::Integrity(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..6] != MAGIC_TAG {
        return Err(Error::Integrity("magic tag mismatch, not a checkpoint file".into()));
    }
    if &bytes[6..8] != VERSION_DIGITS {
        return Err(Error::Version(String::from_utf8_lossy(&bytes[6..8]).into_owned()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Integrity("declared header length exceeds file size".into()))?;
    let header_text = std::str::from_utf8(&bytes[16..header_end])
        .map_err(|_| Error::Integrity("header is not valid UTF-8".into()))?;
    let header: Header =
        toml::from_str(header_text).map_err(|e| Error::Integrity(format!("header parse failed: {e}")))?;
    if header.version != HEADER_VERSION {
        return Err(Error::Version(header.version.to_string()));
    }
    header.config.validate()?;

    let payload = &bytes[header_end..];
    let mut registry = ParameterRegistry::new();
    let mut expected_offset = 0u64;
    for record in &header.params {
        let numel: usize = record.shape.iter().product();
        if numel as u64 != record.count {
            return Err(Error::Integrity(format!(
                "parameter {}: count {} does not match shape {:?}",
                record.name, record.count, record.shape
            )));
        }
        if record.offset != expected_offset {
            return Err(Error::Integrity(format!(
                "parameter {}: offset {} breaks payload continuity (expected {expected_offset})",
                record.name, record.offset
            )));
        }
        let start = record.offset as usize;
        let end = start + numel * 4;
        if end > payload.len() {
            return Err(Error::Integrity(format!("parameter {}: payload truncated", record.name)));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Integrity(format!("parameter {}: non-finite payload value", record.name)));
        }
        let tensor = Tensor::new(data, &record.shape)
            .map_err(|e| Error::Integrity(format!("parameter {}: {e}", record.name)))?;
        registry.insert(&record.name, tensor)?;
        expected_offset = end as u64;
    }
    if expected_offset as usize != payload.len() {
        return Err(Error::Integrity(format!(
            "payload holds {} bytes but manifest accounts for {expected_offset}",
            payload.len()
        )));
    }
    Ok((registry, header.config, header.meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParameterRegistry, ModelConfig, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        msg: format!("cannot read checkpoint: {e}"),
    })?;
    load_checkpoint_bytes(&bytes)
}
