//! Binary tensor container: a length-prefixed JSON header describing a
//! tensor table, followed by the concatenated little-endian payload.
//!
//! Layout on disk:
//!
//! ```text
//! [8 bytes LE u64: header length] [header JSON] [payload bytes]
//! ```
//!
//! The header is `{"format_version": 1, "tensors": {name: entry}}` where an
//! entry carries `dtype` ("f32" or "i8-codes"), `shape`, `byte_offset`, and
//! `byte_length`; "i8-codes" entries additionally carry their quantizer
//! `bits` and `scale`. Entries are sorted by name and offsets are assigned
//! in that order, so save -> load -> save is byte-identical.

use crate::error::{Error, Result};
use crate::quant::{QuantSpec, QuantizedTensor};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

/// A value stored in the container: raw floats or quantizer codes.
#[derive(Debug, Clone, PartialEq)]
pub enum ContainerTensor {
    F32(Tensor),
    I8Codes(QuantizedTensor),
}

impl From<Tensor> for ContainerTensor {
    fn from(t: Tensor) -> Self {
        ContainerTensor::F32(t)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    byte_offset: u64,
    byte_length: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    bits: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scale: Option<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    tensors: BTreeMap<String, TensorEntry>,
}

/// Serialize a named tensor table to `writer`.
pub fn write_container<W: Write>(
    mut writer: W,
    tensors: &BTreeMap<String, ContainerTensor>,
) -> Result<()> {
    let mut entries = BTreeMap::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, value) in tensors {
        let offset = payload.len() as u64;
        let entry = match value {
            ContainerTensor::F32(t) => {
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
                TensorEntry {
                    dtype: "f32".into(),
                    shape: t.shape().to_vec(),
                    byte_offset: offset,
                    byte_length: (t.numel() * 4) as u64,
                    bits: None,
                    scale: None,
                }
            }
            ContainerTensor::I8Codes(q) => {
                payload.extend(q.codes.iter().map(|&c| c as u8));
                TensorEntry {
                    dtype: "i8-codes".into(),
                    shape: q.shape.clone(),
                    byte_offset: offset,
                    byte_length: q.codes.len() as u64,
                    bits: Some(q.spec.bits),
                    scale: Some(q.spec.scale),
                }
            }
        };
        entries.insert(name.clone(), entry);
    }
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        tensors: entries,
    })?;
    writer.write_all(&(header.len() as u64).to_le_bytes())?;
    writer.write_all(&header)?;
    writer.write_all(&payload)?;
    Ok(())
}

/// Deserialize a container from `reader`.
pub fn read_container<R: Read>(mut reader: R) -> Result<BTreeMap<String, ContainerTensor>> {
    let mut len_bytes = [0u8; 8];
    reader.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    reader.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Container(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    let mut out = BTreeMap::new();
    for (name, entry) in header.tensors {
        let start = entry.byte_offset as usize;
        let end = start + entry.byte_length as usize;
        let bytes = payload
            .get(start..end)
            .ok_or_else(|| Error::Container(format!("tensor {name} points outside the payload")))?;
        let numel: usize = entry.shape.iter().product();
        let value = match entry.dtype.as_str() {
            "f32" => {
                if bytes.len() != numel * 4 {
                    return Err(Error::Container(format!(
                        "tensor {name}: {} bytes for {numel} f32 elements",
                        bytes.len()
                    )));
                }
                let data = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                ContainerTensor::F32(Tensor::new(entry.shape, data)?)
            }
            "i8-codes" => {
                if bytes.len() != numel {
                    return Err(Error::Container(format!(
                        "tensor {name}: {} bytes for {numel} codes",
                        bytes.len()
                    )));
                }
                let (bits, scale) = match (entry.bits, entry.scale) {
                    (Some(b), Some(s)) => (b, s),
                    _ => {
                        return Err(Error::Container(format!(
                            "tensor {name}: i8-codes entry without bits/scale"
                        )))
                    }
                };
                ContainerTensor::I8Codes(QuantizedTensor {
                    codes: bytes.iter().map(|&b| b as i8).collect(),
                    spec: QuantSpec::new(bits, scale)?,
                    shape: entry.shape,
                })
            }
            other => {
                return Err(Error::Container(format!(
                    "tensor {name}: unknown dtype {other}"
                )))
            }
        };
        out.insert(name, value);
    }
    Ok(out)
}

/// Write a container file.
pub fn save(path: impl AsRef<Path>, tensors: &BTreeMap<String, ContainerTensor>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_container(std::io::BufWriter::new(file), tensors)
}

/// Read a container file.
pub fn load(path: impl AsRef<Path>) -> Result<BTreeMap<String, ContainerTensor>> {
    let file = std::fs::File::open(path)?;
    read_container(std::io::BufReader::new(file))
}

/// Write a table of plain f32 tensors.
pub fn save_f32(path: impl AsRef<Path>, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let wrapped = tensors
        .iter()
        .map(|(k, v)| (k.clone(), ContainerTensor::F32(v.clone())))
        .collect();
    save(path, &wrapped)
}

/// Read a table that must contain only f32 tensors.
pub fn load_f32(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor>> {
    load(path)?
        .into_iter()
        .map(|(k, v)| match v {
            ContainerTensor::F32(t) => Ok((k, t)),
            ContainerTensor::I8Codes(_) => Err(Error::Container(format!(
                "tensor {k} holds codes, expected f32"
            ))),
        })
        .collect()
}
