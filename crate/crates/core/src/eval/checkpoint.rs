//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes   "PRUNEKIT"
//! header_len u64 LE
//! header     header_len bytes of JSON (see `Header`)
//! payload    concatenated tensors, little-endian f32, row-major
//! ```
//!
//! Each tensor entry records its byte offset into the payload and the
//! SHA-256 of its bytes; loading verifies every checksum.

use std::collections::BTreeMap;
use std::path::Path;

use prunekit_tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{LayerShape, LoraAdapter, Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"PRUNEKIT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterEntry {
    pub target: String,
    pub scaling: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub config: ModelConfig,
    pub layers: Vec<LayerShape>,
    pub tensors: Vec<TensorEntry>,
    pub adapters: Vec<AdapterEntry>,
    /// Free-form provenance (prune mode, ratios, strategy, ...).
    pub metadata: BTreeMap<String, String>,
}

pub fn to_bytes(model: &Model, metadata: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for name in model.tensor_names() {
        let t = model.tensor(&name).expect("listed tensor exists");
        let start = payload.len();
        for v in t.to_f32_vec() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: start as u64,
            sha256: hex::encode(Sha256::digest(&payload[start..])),
        });
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        layers: model.layers().to_vec(),
        tensors,
        adapters: model
            .adapters()
            .iter()
            .map(|(target, a)| AdapterEntry {
                target: target.clone(),
                scaling: a.scaling,
            })
            .collect(),
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec_pretty(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, BTreeMap<String, String>)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing checkpoint magic"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("header length exceeds file size"))?;
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {}", header.format_version)));
    }
    let payload = &bytes[payload_start..];
    let mut params = BTreeMap::new();
    let mut factors: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut expected_offset = 0usize;
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        if start != expected_offset {
            return Err(corrupt(format!("tensor {} is not contiguous", e.name)));
        }
        let end = start + 4 * n;
        if end > payload.len() {
            return Err(corrupt(format!("tensor {} runs past the payload", e.name)));
        }
        let raw = &payload[start..end];
        if hex::encode(Sha256::digest(raw)) != e.sha256 {
            return Err(corrupt(format!("checksum mismatch for tensor {}", e.name)));
        }
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::from_f32(e.shape.clone(), &data)
            .map_err(|err| corrupt(format!("tensor {}: {err}", e.name)))?;
        if e.name.ends_with(".lora_a") || e.name.ends_with(".lora_b") {
            factors.insert(e.name.clone(), t);
        } else {
            params.insert(e.name.clone(), t);
        }
        expected_offset = end;
    }
    if expected_offset != payload.len() {
        return Err(corrupt("trailing bytes after the last tensor"));
    }
    let mut adapters = BTreeMap::new();
    for a in &header.adapters {
        let mut take = |which: &str| {
            factors
                .remove(&format!("{}.lora_{which}", a.target))
                .ok_or_else(|| corrupt(format!("adapter {} lacks factor {which}", a.target)))
        };
        let (fa, fb) = (take("a")?, take("b")?);
        adapters.insert(
            a.target.clone(),
            LoraAdapter {
                a: fa,
                b: fb,
                scaling: a.scaling,
            },
        );
    }
    if !factors.is_empty() {
        return Err(corrupt("adapter factors without an adapter entry"));
    }
    let model = Model::from_parts(header.config, header.layers, params, adapters)
        .map_err(|e| corrupt(e.to_string()))?;
    Ok((model, header.metadata))
}

pub fn save(model: &Model, path: &Path, metadata: &BTreeMap<String, String>) -> Result<()> {
    std::fs::write(path, to_bytes(model, metadata)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, BTreeMap<String, String>)> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}
