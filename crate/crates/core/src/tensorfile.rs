//! Flat container of named float32 arrays.
//!
//! Layout (all integers little-endian):
//!
//! | bytes            | content                                             |
//! |------------------|-----------------------------------------------------|
//! | 8                | `u64` length `N` of the header                      |
//! | N                | UTF-8 JSON header                                   |
//! | rest             | raw `f32` data                                      |
//!
//! The header is `{"metadata": <any JSON>, "tensors": [{"name", "shape",
//! "offset"}, ...]}`, fields in that order. `offset` counts bytes from the
//! start of the data section; each tensor occupies `4 · Π shape` bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    metadata: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor<f32>>,
    /// Names in stored order.
    pub order: Vec<String>,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name:?}")))
    }

    /// Fetches `name` and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
        let t = self.get(name)?;
        if t.shape() != shape {
            return Err(Error::Shape(format!(
                "tensor {name:?} has shape {:?}, expected {:?}",
                t.shape(),
                shape
            )));
        }
        Ok(t.clone())
    }
}

pub fn encode(metadata: serde_json::Value, tensors: &[(String, &Tensor<f32>)]) -> Vec<u8> {
    let mut offset = 0;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let e = Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 4 * t.len();
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        metadata,
        tensors: entries,
    })
    .expect("header serialises");
    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<TensorFile> {
    if bytes.len() < 8 {
        return Err(Error::Format("tensor file shorter than its length prefix".into()));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let header_end = 8usize
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("header length exceeds file size".into()))?;
    let header: Header = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| Error::Format(format!("bad tensor header: {e}")))?;
    let data = &bytes[header_end..];
    let mut file = TensorFile {
        metadata: header.metadata,
        ..TensorFile::default()
    };
    for e in header.tensors {
        let len: usize = e.shape.iter().product();
        let end = e
            .offset
            .checked_add(4 * len)
            .filter(|&end| end <= data.len())
            .ok_or_else(|| Error::Format(format!("tensor {:?} runs past end of data", e.name)))?;
        let values = data[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if file.tensors.contains_key(&e.name) {
            return Err(Error::Format(format!("duplicate tensor {:?}", e.name)));
        }
        file.order.push(e.name.clone());
        file.tensors.insert(e.name, Tensor::from_vec(&e.shape, values)?);
    }
    Ok(file)
}

pub fn save(path: &Path, metadata: serde_json::Value, tensors: &[(String, &Tensor<f32>)]) -> Result<()> {
    std::fs::write(path, encode(metadata, tensors)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TensorFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
