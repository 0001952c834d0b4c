//! Binary checkpoint container.
//!
//! ```text
//! "OODC" | version: u32 LE | header_len: u64 LE | header (UTF-8 JSON) | data
//! ```
//!
//! The header lists every tensor of the parameter table and of the EMA shadow
//! table (name, shape, byte offset into `data`) plus the storage dtype and an
//! opaque `meta` object owned by the caller. Tensor data is little-endian.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OODC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: DType,
    params: Vec<Entry>,
    ema: Vec<Entry>,
    meta: serde_json::Value,
}

/// In-memory contents of a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointFile {
    pub dtype: DType,
    pub params: ParamSet<f64>,
    pub ema: Option<ParamSet<f64>>,
    pub meta: serde_json::Value,
}

fn layout(set: &ParamSet<f64>, dtype: DType, offset: &mut u64) -> Vec<Entry> {
    set.iter()
        .map(|(name, t)| {
            let e = Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: *offset,
            };
            *offset += (t.len() * dtype.width()) as u64;
            e
        })
        .collect()
}

fn push_data(buf: &mut Vec<u8>, set: &ParamSet<f64>, dtype: DType) {
    for (_, t) in set.iter() {
        for &v in t.data() {
            match dtype {
                DType::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
                DType::F64 => buf.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, ck: &CheckpointFile) -> Result<()> {
    let mut offset = 0u64;
    let params = layout(&ck.params, ck.dtype, &mut offset);
    let ema = ck
        .ema
        .as_ref()
        .map(|e| layout(e, ck.dtype, &mut offset))
        .unwrap_or_default();
    let header = Header {
        dtype: ck.dtype,
        params,
        ema,
        meta: ck.meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + offset as usize);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    push_data(&mut buf, &ck.params, ck.dtype);
    if let Some(e) = &ck.ema {
        push_data(&mut buf, e, ck.dtype);
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_table(entries: &[Entry], data: &[u8], dtype: DType) -> Result<ParamSet<f64>> {
    let mut set = ParamSet::new();
    for e in entries {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + n * dtype.width();
        let bytes = data
            .get(start..end)
            .ok_or_else(|| Error::Format(format!("tensor {} extends past end of file", e.name)))?;
        let vals: Vec<f64> = match dtype {
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect(),
            DType::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        if set.insert(e.name.clone(), Tensor::new(e.shape.clone(), vals)?).is_some() {
            return Err(Error::Format(format!("duplicate tensor name {}", e.name)));
        }
    }
    Ok(set)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<CheckpointFile> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("missing OODC magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: Header = serde_json::from_slice(json)?;
    let data = &bytes[16 + hlen..];
    let params = read_table(&header.params, data, header.dtype)?;
    let ema = if header.ema.is_empty() {
        None
    } else {
        Some(read_table(&header.ema, data, header.dtype)?)
    };
    Ok(CheckpointFile {
        dtype: header.dtype,
        params,
        ema,
        meta: header.meta,
    })
}
