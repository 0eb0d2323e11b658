//! GRSN checkpoint files: model parameters plus optional Adam state.
//!
//! Layout: `"GRSN"`, `u32` version, `u32` metadata length, metadata JSON,
//! then the tensors back to back as little-endian `f32`. All integers are
//! little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{Detector, ModelConfig};
use crate::error::{Error, Result};
use crate::fusion::Variant;
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"GRSN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Hex SHA-256 of the canonical JSON form of a model config.
pub fn config_hash(config: &ModelConfig) -> String {
    let json = serde_json::to_string(config).expect("model config serialises");
    Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub config: AdamConfig,
    pub step_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub variant: Variant,
    pub config_hash: String,
    pub model: ModelConfig,
    pub seed: u64,
    pub optimizer: Option<OptimizerMeta>,
    pub tensors: Vec<ManifestEntry>,
}

/// A restored model and, if it was saved, its optimizer.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: Detector<T>,
    pub optimizer: Option<Adam<T>>,
    pub seed: u64,
}

pub fn encode_checkpoint<T: Scalar>(model: &Detector<T>, optimizer: Option<&Adam<T>>, seed: u64) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |name: String, t: &Tensor<T>| {
        tensors.push(ManifestEntry {
            name,
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for &v in t.data() {
            payload.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    };
    for (_, p) in model.store().iter() {
        push(p.name.clone(), &p.value);
    }
    if let Some(adam) = optimizer {
        for ((_, p), (m, v)) in model
            .store()
            .iter()
            .zip(adam.first_moment().iter().zip(adam.second_moment()))
        {
            push(format!("adam.m.{}", p.name), m);
            push(format!("adam.v.{}", p.name), v);
        }
    }
    let meta = CheckpointMeta {
        variant: model.variant(),
        config_hash: config_hash(model.config()),
        model: model.config().clone(),
        seed,
        optimizer: optimizer.map(|a| OptimizerMeta {
            config: a.config,
            step_count: a.step_count(),
        }),
        tensors,
    };
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &Detector<T>, optimizer: Option<&Adam<T>>, seed: u64) -> Result<()> {
    fs::write(path, encode_checkpoint(model, optimizer, seed)?)?;
    Ok(())
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(at as u64, "unexpected end of file"))
}

/// Parses and validates the header and metadata block.
pub fn decode_meta(bytes: &[u8]) -> Result<(CheckpointMeta, usize)> {
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(Error::format(0, "missing GRSN magic"));
    }
    let version = read_u32(bytes, 4)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            4,
            format!("checkpoint version {version} does not match supported version {CHECKPOINT_VERSION}"),
        ));
    }
    let len = read_u32(bytes, 8)? as usize;
    let json = bytes
        .get(12..12 + len)
        .ok_or_else(|| Error::format(12, "metadata block runs past end of file"))?;
    let meta: CheckpointMeta =
        serde_json::from_slice(json).map_err(|e| Error::format(12, format!("bad metadata: {e}")))?;
    let actual = config_hash(&meta.model);
    if actual != meta.config_hash {
        return Err(Error::format(
            12,
            format!("config hash {} does not match embedded config hash {actual}", meta.config_hash),
        ));
    }
    if meta.model.variant != meta.variant {
        return Err(Error::format(12, "variant disagrees with embedded model config"));
    }
    Ok((meta, 12 + len))
}

/// Loads a checkpoint. When `expected` is given its hash must equal the
/// stored one.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint<T>> {
    let (meta, start) = decode_meta(bytes)?;
    if let Some(cfg) = expected {
        let want = config_hash(cfg);
        if want != meta.config_hash {
            return Err(Error::format(
                12,
                format!("checkpoint config hash {} does not match expected {want}", meta.config_hash),
            ));
        }
    }
    let payload = &bytes[start..];
    let mut model = Detector::<T>::new(meta.model.clone(), 0).map_err(|e| Error::format(12, e.to_string()))?;
    let mut entries = meta.tensors.iter();
    let mut next = |expected_name: &str, expected_shape: &[usize]| -> Result<Tensor<T>> {
        let e = entries
            .next()
            .ok_or_else(|| Error::format(12, format!("manifest is missing {expected_name}")))?;
        if e.name != expected_name || e.shape != expected_shape {
            return Err(Error::format(
                12,
                format!(
                    "manifest entry {} {:?} does not match model tensor {expected_name} {expected_shape:?}",
                    e.name, e.shape
                ),
            ));
        }
        let n: usize = e.shape.iter().product();
        let begin = e.offset as usize;
        let raw = payload
            .get(begin..begin + 4 * n)
            .ok_or_else(|| Error::format((start + begin) as u64, format!("payload for {} is truncated", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        Tensor::new(&e.shape, data)
    };
    let names: Vec<(String, Vec<usize>)> = model
        .store()
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.shape().to_vec()))
        .collect();
    let ids: Vec<_> = model.store().ids().collect();
    for (id, (name, shape)) in ids.iter().zip(&names) {
        let t = next(name, shape)?;
        model.store_mut().set_value(*id, t)?;
    }
    let optimizer = match &meta.optimizer {
        Some(o) => {
            let mut first = Vec::with_capacity(names.len());
            let mut second = Vec::with_capacity(names.len());
            for (name, shape) in &names {
                first.push(next(&format!("adam.m.{name}"), shape)?);
                second.push(next(&format!("adam.v.{name}"), shape)?);
            }
            let mut adam = Adam::new(o.config, model.store());
            adam.restore(o.step_count, first, second)?;
            Some(adam)
        }
        None => None,
    };
    if entries.next().is_some() {
        return Err(Error::format(12, "manifest has extra tensors"));
    }
    Ok(Checkpoint {
        model,
        optimizer,
        seed: meta.seed,
    })
}

pub fn load_checkpoint<T: Scalar>(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes, expected)
}
