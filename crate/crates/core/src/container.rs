// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary tensor container shared by models, SAEs, feature matrices and probes.
//!
//! Layout:
//!
//! ```text
//! magic    8 bytes   b"LSCOPE\0\x01"
//! version  u32 LE
//! hlen     u64 LE    length of the JSON header in bytes
//! header   hlen bytes, UTF-8 JSON: { kind, meta, tensors: [{name, dtype, shape, offset, nbytes}] }
//! data     concatenated little-endian tensor payloads; offsets relative to data start
//! ```
//!
//! Only `f64` is written. `f32` payloads are accepted on read and widened.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MAGIC: [u8; 8] = *b"LSCOPE\0\x01";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn size(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A named n-dimensional `f64` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    #[must_use]
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    #[must_use]
    pub fn matrix(m: &Matrix) -> Self {
        Self {
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }

    /// Interpret as a rank-2 matrix with the expected shape.
    pub fn into_matrix(self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        if self.shape != [rows, cols] {
            return Err(Error::Format(format!(
                "tensor `{name}` has shape {:?}, header expects [{rows}, {cols}]",
                self.shape
            )));
        }
        Matrix::from_vec(rows, cols, self.data)
    }

    /// Interpret as a rank-1 vector with the expected length.
    pub fn into_vector(self, name: &str, len: usize) -> Result<Vec<f64>> {
        if self.shape != [len] {
            return Err(Error::Format(format!(
                "tensor `{name}` has shape {:?}, header expects [{len}]",
                self.shape
            )));
        }
        Ok(self.data)
    }
}

/// In-memory view of a container file.
#[derive(Debug, Clone)]
pub struct TensorFile {
    pub kind: String,
    pub meta: serde_json::Value,
    tensors: Vec<(String, Tensor)>,
}

impl TensorFile {
    #[must_use]
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    /// Remove and return the named tensor.
    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        let idx = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
        Ok(self.tensors.remove(idx).1)
    }

    #[must_use]
    pub fn names(&self) -> Vec<&str> {
        self.tensors.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// Fail unless the file is of the given kind.
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "expected a `{kind}` container, found `{}`",
                self.kind
            )))
        }
    }

    #[must_use]
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            let nbytes = t.data.len() * 8;
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: DType::F64,
                shape: t.shape.clone(),
                offset,
                nbytes,
            });
            offset += nbytes;
        }
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let header_bytes = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header_bytes.len() + offset);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for (_, t) in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fixed = MAGIC.len() + 4 + 8;
        if bytes.len() < fixed {
            return Err(Error::Format(format!(
                "truncated container: {} bytes, need at least {fixed}",
                bytes.len()
            )));
        }
        if bytes[..8] != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported container version {version} (expected {VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let hlen = usize::try_from(hlen).map_err(|_| Error::Format("header too large".into()))?;
        let data_start = fixed
            .checked_add(hlen)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Format("truncated container header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[fixed..data_start])
            .map_err(|e| Error::Format(format!("malformed header: {e}")))?;
        let data = &bytes[data_start..];

        let mut expected_offset = 0usize;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let numel: usize = entry.shape.iter().product();
            if entry.nbytes != numel * entry.dtype.size() {
                return Err(Error::Format(format!(
                    "tensor `{}`: shape {:?} disagrees with nbytes {}",
                    entry.name, entry.shape, entry.nbytes
                )));
            }
            if entry.offset != expected_offset {
                return Err(Error::Format(format!(
                    "tensor `{}`: offset {} is not contiguous (expected {expected_offset})",
                    entry.name, entry.offset
                )));
            }
            let end = entry.offset + entry.nbytes;
            if end > data.len() {
                return Err(Error::Format(format!(
                    "truncated container: tensor `{}` needs bytes up to {end}, data has {}",
                    entry.name,
                    data.len()
                )));
            }
            let raw = &data[entry.offset..end];
            let values: Vec<f64> = match entry.dtype {
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                    .collect(),
            };
            expected_offset = end;
            tensors.push((
                entry.name,
                Tensor {
                    shape: entry.shape,
                    data: values,
                },
            ));
        }
        if expected_offset != data.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last tensor",
                data.len() - expected_offset
            )));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Read a required field out of a container's JSON metadata.
pub(crate) fn meta_field<T: serde::de::DeserializeOwned>(
    meta: &serde_json::Value,
    field: &str,
) -> Result<T> {
    let v = meta
        .get(field)
        .ok_or_else(|| Error::Format(format!("header missing field `{field}`")))?;
    serde_json::from_value(v.clone())
        .map_err(|e| Error::Format(format!("header field `{field}`: {e}")))
}
