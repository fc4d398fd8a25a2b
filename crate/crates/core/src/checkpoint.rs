//! Versioned named-tensor container: magic, format version, a JSON header
//! (model config, free-form metadata, tensor directory) and raw
//! little-endian tensor data.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{Tensor, VitConfig};
use crate::error::{Error, Result};
use crate::real::Real;

pub const MAGIC: &[u8; 8] = b"SETDINO\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data section.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub model: VitConfig,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint: header plus tensors in file order.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub header: Header,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Checkpoint<T> {
    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Write atomically (temporary file, then rename).
pub fn write<T: Real>(
    path: &Path,
    model: &VitConfig,
    meta: serde_json::Value,
    tensors: &[(String, &Tensor<T>)],
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        if t.data.len() != t.shape.iter().product::<usize>() {
            return Err(Error::Shape(format!("tensor {name} data does not match its shape")));
        }
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: T::DTYPE.into(),
            shape: t.shape.clone(),
            offset,
        });
        offset += (t.data.len() * T::BYTES) as u64;
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        model: model.clone(),
        meta,
        tensors: entries,
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = Vec::with_capacity(20 + header_bytes.len() + offset as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for (_, t) in tensors {
        for &v in &t.data {
            v.write_le(&mut buf);
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let data_start = 20 + header_len;
    if bytes.len() < data_start {
        return Err(Error::format(path, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[20..data_start])
        .map_err(|e| Error::format(path, e.to_string()))?;
    let data = &bytes[data_start..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let width = match e.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::format(path, format!("unknown dtype {other}"))),
        };
        let start = e.offset as usize;
        let end = start + n * width;
        if end > data.len() {
            return Err(Error::format(path, format!("tensor {} exceeds the file", e.name)));
        }
        let values = data[start..end]
            .chunks_exact(width)
            .map(|b| {
                if width == 4 {
                    T::lit(f32::from_le(b) as f64)
                } else {
                    T::lit(f64::from_le(b))
                }
            })
            .collect();
        tensors.push((
            e.name.clone(),
            Tensor {
                shape: e.shape.clone(),
                data: values,
            },
        ));
    }
    Ok(Checkpoint { header, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderState;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = VitConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            depth: 1,
            n_heads: 2,
            mlp_ratio: 2,
            n_prototypes: 6,
            projector_hidden_dim: 10,
            bottleneck_dim: 5,
        };
        let state = EncoderState::<f32>::init(&cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let named: Vec<(String, &Tensor<f32>)> = state
            .names
            .iter()
            .map(|n| format!("student.{n}"))
            .zip(state.tensors.iter())
            .collect();
        write(&path, &cfg, serde_json::json!({"step": 3}), &named).unwrap();
        let ck = read::<f32>(&path).unwrap();
        assert_eq!(ck.header.meta["step"], 3);
        let back = EncoderState::from_named(&cfg, ck.with_prefix("student.")).unwrap();
        assert_eq!(back.tensors, state.tensors);
    }

    #[test]
    fn garbage_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        std::fs::write(&path, b"hello world, not a checkpoint").unwrap();
        assert!(matches!(read::<f32>(&path), Err(Error::Format { .. })));
    }
}
