//! Versioned binary checkpoints.
//!
//! Layout: the magic `SGST`, a little-endian `u32` format version, a
//! little-endian `u64` header length, the JSON header, then every tensor's
//! values as little-endian `f64` in directory order. Directory offsets are
//! byte offsets from the start of the payload.

use serde::{Deserialize, Serialize};

use crate::data::Vocabs;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SGST";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocabs: Vocabs,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(model: &Model, vocabs: &Vocabs) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let tensors = model
        .params
        .iter()
        .map(|(name, t)| {
            let entry = TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 8 * t.numel() as u64;
            entry
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        vocabs: vocabs.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in model.params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = at
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format(format!("truncated while reading {what}")))?;
    let out = &bytes[*at..end];
    *at = end;
    Ok(out)
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<(Model, Vocabs)> {
    let mut at = 0;
    if take(bytes, &mut at, 4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(
        take(bytes, &mut at, 4, "version")?
            .try_into()
            .expect("4 bytes"),
    );
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let len = u64::from_le_bytes(
        take(bytes, &mut at, 8, "header length")?
            .try_into()
            .expect("8 bytes"),
    );
    let len = usize::try_from(len).map_err(|_| Error::Format("header length overflows".into()))?;
    let header: Header = serde_json::from_slice(take(bytes, &mut at, len, "header")?)
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    header.config.validate()?;
    let payload = &bytes[at..];
    let mut params = ParamStore::new();
    let mut expected = 0u64;
    for entry in header.tensors {
        if entry.offset != expected {
            return Err(Error::Format(format!(
                "tensor {} has offset {}, expected {expected}",
                entry.name, entry.offset
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let mut pos = entry.offset as usize;
        let raw = take(payload, &mut pos, 8 * numel, &entry.name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        expected += 8 * numel as u64;
        params.insert(entry.name, Tensor::new(entry.shape, data)?);
    }
    if payload.len() as u64 != expected {
        return Err(Error::Format(format!(
            "{} trailing payload bytes",
            payload.len() as u64 - expected.min(payload.len() as u64)
        )));
    }
    let reference = crate::model::init_params(&header.config, 0)?;
    for (name, t) in reference.iter() {
        let got = params
            .get(name)
            .map_err(|_| Error::Format(format!("missing tensor {name}")))?;
        if got.shape() != t.shape() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    if params.len() != reference.len() {
        return Err(Error::Format("checkpoint has unexpected tensors".into()));
    }
    Ok((
        Model {
            config: header.config,
            params,
        },
        header.vocabs,
    ))
}
