//! The SAVT tensor container.
//!
//! ```text
//! "SAVT" | version: u32 LE | manifest_len: u64 LE | manifest (UTF-8 JSON)
//! | zero padding to a 64-byte offset | tensor 0 | padding | tensor 1 | ...
//! ```
//!
//! The manifest is `{"meta": <any JSON>, "tensors": [{"name", "shape", "dtype"}]}`
//! and payloads follow in manifest order as little-endian values. Every
//! payload starts at a file offset that is a multiple of 64.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::{DType, Scalar};

pub const MAGIC: [u8; 4] = *b"SAVT";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    meta: Value,
    tensors: Vec<TensorEntry>,
}

/// A tensor together with the precision it is stored at.
///
/// Values are held as `f64`; for `F32` entries they are exactly
/// representable in `f32`, so writing is lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub dtype: DType,
    pub tensor: Tensor<f64>,
}

impl StoredTensor {
    /// Rounds `t` to `dtype` precision.
    pub fn new<S: Scalar>(t: &Tensor<S>, dtype: DType) -> Self {
        let tensor = match dtype {
            DType::F64 => t.cast::<f64>(),
            DType::F32 => t.cast::<f32>().cast::<f64>(),
        };
        Self { dtype, tensor }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: Value,
    pub tensors: Vec<(String, StoredTensor)>,
}

fn pad_to(buf: &mut Vec<u8>, align: usize) {
    let rem = buf.len() % align;
    if rem != 0 {
        buf.resize(buf.len() + align - rem, 0);
    }
}

fn aligned(offset: usize) -> usize {
    offset.div_ceil(ALIGN) * ALIGN
}

impl Container {
    pub fn new(meta: Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push<S: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<S>, dtype: DType) {
        self.tensors.push((name.into(), StoredTensor::new(t, dtype)));
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> Vec<TensorEntry> {
        self.tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.tensor.shape().to_vec(),
                dtype: t.dtype,
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            meta: self.meta.clone(),
            tensors: self.entries(),
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Manifest(e.to_string()))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            pad_to(&mut buf, ALIGN);
            for &v in t.tensor.data() {
                match t.dtype {
                    DType::F64 => v.write_le(&mut buf),
                    DType::F32 => (v as f32).write_le(&mut buf),
                }
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Truncated(format!("{} bytes, header needs 16", bytes.len())));
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let end = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Truncated(format!("manifest of {len} bytes runs past end of file")))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[16..end]).map_err(|e| Error::Manifest(e.to_string()))?;

        let mut offset = end;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in manifest.tensors {
            offset = aligned(offset);
            let numel = entry
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Manifest(format!("shape of `{}` overflows", entry.name)))?;
            let size = entry.dtype.size_of();
            let nbytes = numel
                .checked_mul(size)
                .ok_or_else(|| Error::Manifest(format!("size of `{}` overflows", entry.name)))?;
            if offset + nbytes > bytes.len() {
                return Err(Error::Truncated(format!(
                    "tensor `{}` needs {nbytes} bytes at offset {offset}, file has {}",
                    entry.name,
                    bytes.len()
                )));
            }
            let raw = &bytes[offset..offset + nbytes];
            let data: Vec<f64> = match entry.dtype {
                DType::F64 => raw.chunks_exact(8).map(f64::read_le).collect(),
                DType::F32 => raw.chunks_exact(4).map(|c| f32::read_le(c) as f64).collect(),
            };
            offset += nbytes;
            tensors.push((
                entry.name,
                StoredTensor {
                    dtype: entry.dtype,
                    tensor: Tensor::new(entry.shape, data)?,
                },
            ));
        }
        if offset != bytes.len() && !tensors.is_empty() {
            return Err(Error::Manifest(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - offset
            )));
        }
        Ok(Self {
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Container {
        let mut c = Container::new(json!({"kind": "test"}));
        c.push("a", &Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 * 0.1), DType::F64);
        c.push("b", &Tensor::<f64>::from_fn(&[5], |i| i as f64 / 3.0), DType::F32);
        c
    }

    #[test]
    fn layout_is_aligned() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"SAVT");
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let first = aligned(16 + len);
        assert_eq!(first % 64, 0);
        assert_eq!(f64::read_le(&bytes[first + 8..]), 0.1);
        assert_eq!(bytes.len(), aligned(first + 48) + 20);
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.get("b").unwrap().tensor.data()[1], (1.0f64 / 3.0) as f32 as f64);
    }

    #[test]
    fn rejects_bad_headers() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Container::from_bytes(&bad), Err(Error::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Container::from_bytes(&bad), Err(Error::Version { found: 9, .. })));
        assert!(matches!(
            Container::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(Container::from_bytes(&bytes[..10]), Err(Error::Truncated(_))));
        let mut bad = bytes.clone();
        bad[17] = b'#';
        assert!(matches!(Container::from_bytes(&bad), Err(Error::Manifest(_))));
    }
}
