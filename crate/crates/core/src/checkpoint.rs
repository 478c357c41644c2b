//! Versioned checkpoint container.
//!
//! Layout, all integers little endian:
//!
//! ```text
//! 0..4    magic "FCKP"
//! 4..8    format version, u32 (currently 1)
//! 8..16   header length in bytes, u64
//! 16..    JSON header (CheckpointMeta plus a tensor directory)
//! then    one f32 blob per tensor, in directory order
//! ```
//!
//! The header echoes the model and preprocessing configuration, the class
//! list, the seed, and the fold/epoch counters from which training rng
//! streams are re-derived; restoring those counters reproduces the exact
//! stream a resumed run would have used. A SHA-256 over the serialized model
//! config guards against loading weights into a different topology.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::preprocess::PreprocessConfig;

const MAGIC: &[u8; 4] = b"FCKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub config_sha256: String,
    pub preprocess: PreprocessConfig,
    pub classes: Vec<String>,
    pub seed: u64,
    pub fold: usize,
    /// Completed epochs at save time.
    pub epoch: usize,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct Header {
    meta: CheckpointMeta,
    tensors: Vec<TensorMeta>,
}

/// Hex SHA-256 of the serialized model config.
pub fn config_hash(config: &ModelConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn corrupt(detail: &str) -> Error {
    Error::Checkpoint(format!("corrupt checkpoint: {detail}"))
}

pub fn save(path: &Path, meta: &CheckpointMeta, tensors: &[(String, ArrayD<f32>)]) -> Result<()> {
    if meta.config_sha256 != config_hash(&meta.config) {
        return Err(Error::Checkpoint(
            "config hash does not match the config being saved".into(),
        ));
    }
    let header = Header {
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(name, a)| TensorMeta {
                name: name.clone(),
                shape: a.shape().to_vec(),
            })
            .collect(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let write = |out: &mut std::io::BufWriter<std::fs::File>, bytes: &[u8]| -> Result<()> {
        out.write_all(bytes).map_err(|e| Error::io(path, e))
    };
    write(&mut out, MAGIC)?;
    write(&mut out, &VERSION.to_le_bytes())?;
    write(&mut out, &(header_json.len() as u64).to_le_bytes())?;
    write(&mut out, &header_json)?;
    for (_, tensor) in tensors {
        for &v in tensor.iter() {
            write(&mut out, &v.to_le_bytes())?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(CheckpointMeta, Vec<(String, ArrayD<f32>)>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = std::io::BufReader::new(file);
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;

    if bytes.len() < 16 {
        return Err(corrupt("shorter than the fixed prelude"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "version mismatch: file has {version}, this build reads {VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body_start = 16usize
        .checked_add(header_len)
        .ok_or_else(|| corrupt("header length overflows"))?;
    if bytes.len() < body_start {
        return Err(corrupt("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[16..body_start])
        .map_err(|e| corrupt(&format!("unreadable header: {e}")))?;
    if header.meta.config_sha256 != config_hash(&header.meta.config) {
        return Err(Error::Checkpoint(
            "config hash mismatch: header was altered or written by a different config".into(),
        ));
    }

    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut offset = body_start;
    for tm in &header.tensors {
        let len: usize = tm.shape.iter().product();
        let nbytes = len
            .checked_mul(4)
            .ok_or_else(|| corrupt("tensor size overflows"))?;
        let end = offset
            .checked_add(nbytes)
            .ok_or_else(|| corrupt("tensor offset overflows"))?;
        if bytes.len() < end {
            return Err(corrupt(&format!("truncated tensor '{}'", tm.name)));
        }
        let mut data = Vec::with_capacity(len);
        for chunk in bytes[offset..end].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        let array = ArrayD::from_shape_vec(IxDyn(&tm.shape), data)
            .map_err(|e| corrupt(&format!("tensor '{}' shape: {e}", tm.name)))?;
        tensors.push((tm.name.clone(), array));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(corrupt("trailing bytes after the last tensor"));
    }
    Ok((header.meta, tensors))
}

/// Guard for consumers that require a checkpoint trained with a specific
/// topology.
pub fn require_config(meta: &CheckpointMeta, expected: &ModelConfig) -> Result<()> {
    if &meta.config != expected {
        return Err(Error::Checkpoint(
            "checkpoint was trained with a different model config".into(),
        ));
    }
    Ok(())
}
