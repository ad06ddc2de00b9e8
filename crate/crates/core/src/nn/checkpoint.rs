//! Checkpoint layout: 8-byte magic, little-endian `u64` header length, JSON
//! header, then every parameter value as little-endian `f64` in layout order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, ModelConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"USRCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub epoch: usize,
    pub seed: u64,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

pub fn encode_checkpoint(model: &Model, epoch: usize, seed: u64) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        config: model.config().clone(),
        epoch,
        seed,
        params: model
            .param_names()
            .iter()
            .zip(model.params())
            .map(|(n, p)| ParamEntry {
                name: n.clone(),
                shape: p.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + model.param_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model, CheckpointHeader)> {
    let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic bytes"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..).ok_or_else(|| bad("truncated"))?;
    if hlen > body.len() {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])?;
    let blob = &body[hlen..];
    let mut values = Vec::with_capacity(header.params.len());
    let mut off = 0;
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        let end = off + n * 8;
        let chunk = blob.get(off..end).ok_or_else(|| bad("truncated parameter data"))?;
        values.push(
            chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        );
        off = end;
    }
    if off != blob.len() {
        return Err(bad("trailing bytes after parameter data"));
    }
    let model = Model::from_parts(header.config.clone(), values)?;
    for (entry, (name, p)) in header.params.iter().zip(model.param_names().iter().zip(model.params())) {
        if &entry.name != name || entry.shape != p.shape() {
            return Err(bad(&format!("parameter {} does not match the config", entry.name)));
        }
    }
    Ok((model, header))
}

pub fn save_checkpoint(path: &Path, model: &Model, epoch: usize, seed: u64) -> Result<()> {
    fs::write(path, encode_checkpoint(model, epoch, seed)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointHeader)> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    decode_checkpoint(&fs::read(path)?)
}
