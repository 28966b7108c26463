//! Binary checkpoints: magic, version, a JSON header carrying the model
//! config, then every tensor as raw little-endian scalars in declaration
//! order.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ModelConfig, Params};
use crate::error::{Error, Result};
use crate::float::Float;

const MAGIC: &[u8; 8] = b"AFCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub dtype: String,
    pub shapes: Vec<(usize, usize)>,
}

pub fn encode_checkpoint<F: Float>(params: &Params<F>) -> Vec<u8> {
    let header = CheckpointHeader {
        config: params.config.clone(),
        dtype: F::DTYPE.to_string(),
        shapes: params.tensors().iter().map(|t| t.shape()).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + params.num_scalars() * F::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    out
}

fn split_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            expected: 16,
            found: bytes.len(),
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::CheckpointFormat("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion(version));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + hlen {
        return Err(Error::Truncated {
            expected: 16 + hlen,
            found: bytes.len(),
        });
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + hlen])
        .map_err(|e| Error::CheckpointFormat(format!("header: {e}")))?;
    Ok((header, &bytes[16 + hlen..]))
}

pub fn decode_checkpoint<F: Float>(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Params<F>> {
    let (header, payload) = split_header(bytes)?;
    if header.dtype != F::DTYPE {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint holds {} tensors, {} requested",
            header.dtype,
            F::DTYPE
        )));
    }
    if let Some(cfg) = expected {
        if *cfg != header.config {
            return Err(Error::ConfigMismatch(describe_mismatch(cfg, &header.config)));
        }
    }
    let mut params = Params::<F>::init(&header.config)?;
    let shapes: Vec<_> = params.tensors().iter().map(|t| t.shape()).collect();
    if shapes != header.shapes {
        return Err(Error::CheckpointFormat("tensor shapes disagree with config".into()));
    }
    let need = params.num_scalars() * F::BYTES;
    if payload.len() < need {
        return Err(Error::Truncated {
            expected: bytes.len() - payload.len() + need,
            found: bytes.len(),
        });
    }
    if payload.len() > need {
        return Err(Error::CheckpointFormat(format!(
            "{} trailing bytes",
            payload.len() - need
        )));
    }
    let mut off = 0;
    for t in params.tensors_mut() {
        for x in t.data_mut() {
            *x = F::read_le(&payload[off..off + F::BYTES]);
            off += F::BYTES;
        }
    }
    Ok(params)
}

fn describe_mismatch(want: &ModelConfig, found: &ModelConfig) -> String {
    let w = serde_json::to_value(want).expect("config serializes");
    let f = serde_json::to_value(found).expect("config serializes");
    let mut diffs = Vec::new();
    if let (Some(w), Some(f)) = (w.as_object(), f.as_object()) {
        for (k, v) in w {
            if f.get(k) != Some(v) {
                diffs.push(format!("{k}: expected {v}, found {}", f.get(k).cloned().unwrap_or_default()));
            }
        }
    }
    diffs.join(", ")
}

/// Written to a temporary sibling and renamed, so an interrupted save never
/// clobbers the previous checkpoint.
pub fn save_checkpoint<F: Float>(params: &Params<F>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(params);
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<F: Float>(path: &Path, expected: Option<&ModelConfig>) -> Result<Params<F>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected)
}

pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split_header(&bytes)?.0)
}
