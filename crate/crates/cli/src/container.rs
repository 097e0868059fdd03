//! Named-tensor container.
//!
//! Layout: `XPTC` magic, `u32` LE version, `u64` LE header length, a UTF-8 JSON header,
//! then the payload. The header lists every tensor with its dtype, shape, byte offset
//! into the payload and byte length. Floats are little-endian IEEE-754; `u8` tensors
//! hold masks and must contain only 0 and 1.
//!
//! Writers lay tensors out contiguously in name order, so equal inputs produce equal
//! bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use xpert_core::Matrix;

pub const MAGIC: &[u8; 4] = b"XPTC";
pub const VERSION: u32 = 1;
/// Magic, version and header length.
pub const PREAMBLE_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("not a tensor container: bad magic bytes {0:02x?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported container version {found} (this build reads version {VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("file ends inside the {0}")]
    TruncatedHeader(&'static str),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("invalid tensor name {0:?}: names must be nonempty printable ASCII")]
    InvalidName(String),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("tensor {name:?}: shape {shape:?} with dtype {dtype} needs {expected} bytes, header says {found}")]
    LengthMismatch {
        name: String,
        shape: Vec<usize>,
        dtype: DType,
        expected: u64,
        found: u64,
    },
    #[error("tensors {first:?} and {second:?} overlap in the payload")]
    OverlappingOffsets { first: String, second: String },
    #[error("tensor {name:?} spans bytes {start}..{end} but the payload has {available}")]
    TruncatedPayload {
        name: String,
        start: u64,
        end: u64,
        available: u64,
    },
    #[error("mask tensor {name:?} holds {value} at flat index {index}; masks must be 0 or 1")]
    NonBinaryMask { name: String, index: usize, value: f64 },
    #[error("tensor {name:?} holds a non-finite value at flat index {index}")]
    NonFinite { name: String, index: usize },
    #[error("tensor {name:?} not found in container")]
    MissingTensor { name: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ContainerError {
    pub fn kind(&self) -> &'static str {
        match self {
            ContainerError::BadMagic(_) => "bad_magic",
            ContainerError::UnsupportedVersion { .. } => "unsupported_version",
            ContainerError::TruncatedHeader(_) => "truncated_header",
            ContainerError::MalformedHeader(_) => "malformed_header",
            ContainerError::InvalidName(_) => "invalid_name",
            ContainerError::DuplicateName(_) => "duplicate_name",
            ContainerError::LengthMismatch { .. } => "length_mismatch",
            ContainerError::OverlappingOffsets { .. } => "overlapping_offsets",
            ContainerError::TruncatedPayload { .. } => "truncated_payload",
            ContainerError::NonBinaryMask { .. } => "non_binary_mask",
            ContainerError::NonFinite { .. } => "non_finite",
            ContainerError::MissingTensor { .. } => "missing_tensor",
            ContainerError::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, ContainerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    F32,
    U8,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DType::F64 => "f64",
            DType::F32 => "f32",
            DType::U8 => "u8",
        })
    }
}

/// A matrix together with the dtype it is stored as.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dtype: DType,
    pub data: Matrix,
}

impl Tensor {
    pub fn f64(data: Matrix) -> Self {
        Tensor { dtype: DType::F64, data }
    }

    pub fn mask(data: Matrix) -> Self {
        Tensor { dtype: DType::U8, data }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    tensors: Vec<IndexEntry>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

/// Tensors by name plus free-form string metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || !name.bytes().all(|b| (0x20..0x7f).contains(&b)) {
        return Err(ContainerError::InvalidName(name.to_string()));
    }
    Ok(())
}

fn check_finite(name: &str, values: impl IntoIterator<Item = f64>) -> Result<()> {
    match values.into_iter().position(|v| !v.is_finite()) {
        Some(index) => Err(ContainerError::NonFinite {
            name: name.to_string(),
            index,
        }),
        None => Ok(()),
    }
}

fn check_binary(name: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| *v != 0.0 && *v != 1.0) {
        Some(index) => Err(ContainerError::NonBinaryMask {
            name: name.to_string(),
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .get(name)
            .map(|t| &t.data)
            .ok_or_else(|| ContainerError::MissingTensor { name: name.to_string() })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut index = Vec::with_capacity(self.tensors.len());
        for (name, tensor) in &self.tensors {
            check_name(name)?;
            let offset = payload.len() as u64;
            let values = tensor.data.data();
            check_finite(name, values.iter().copied())?;
            match tensor.dtype {
                DType::F64 => values.iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
                DType::F32 => {
                    check_finite(name, values.iter().map(|v| *v as f32 as f64))?;
                    values.iter().for_each(|v| payload.extend_from_slice(&(*v as f32).to_le_bytes()))
                }
                DType::U8 => {
                    check_binary(name, values)?;
                    payload.extend(values.iter().map(|v| *v as u8));
                }
            }
            index.push(IndexEntry {
                name: name.clone(),
                dtype: tensor.dtype,
                shape: vec![tensor.data.rows(), tensor.data.cols()],
                offset,
                length: payload.len() as u64 - offset,
            });
        }
        let header = serde_json::to_vec(&Header {
            tensors: index,
            metadata: self.metadata.clone(),
        })
        .map_err(|e| ContainerError::MalformedHeader(e.to_string()))?;

        let mut out = Vec::with_capacity(PREAMBLE_LEN + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() {
            return Err(ContainerError::TruncatedHeader("magic bytes"));
        }
        if &bytes[..4] != MAGIC {
            return Err(ContainerError::BadMagic(bytes[..4].to_vec()));
        }
        if bytes.len() < 8 {
            return Err(ContainerError::TruncatedHeader("version field"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(ContainerError::UnsupportedVersion { found: version });
        }
        if bytes.len() < PREAMBLE_LEN {
            return Err(ContainerError::TruncatedHeader("header length field"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let rest = &bytes[PREAMBLE_LEN..];
        if header_len > rest.len() as u64 {
            return Err(ContainerError::TruncatedHeader("JSON header"));
        }
        let (header_bytes, payload) = rest.split_at(header_len as usize);
        let text = std::str::from_utf8(header_bytes)
            .map_err(|e| ContainerError::MalformedHeader(format!("header is not UTF-8: {e}")))?;
        let header: Header = serde_json::from_str(text).map_err(|e| ContainerError::MalformedHeader(e.to_string()))?;

        let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(header.tensors.len());
        let mut tensors = BTreeMap::new();
        for entry in &header.tensors {
            check_name(&entry.name)?;
            if tensors.contains_key(&entry.name) {
                return Err(ContainerError::DuplicateName(entry.name.clone()));
            }
            let (rows, cols) = match entry.shape[..] {
                [rows, cols] if rows > 0 && cols > 0 => (rows, cols),
                _ => {
                    return Err(ContainerError::MalformedHeader(format!(
                        "tensor {:?} has shape {:?}; expected two positive dimensions",
                        entry.name, entry.shape
                    )))
                }
            };
            let expected = (rows as u64)
                .checked_mul(cols as u64)
                .and_then(|n| n.checked_mul(entry.dtype.size() as u64));
            if expected != Some(entry.length) {
                return Err(ContainerError::LengthMismatch {
                    name: entry.name.clone(),
                    shape: entry.shape.clone(),
                    dtype: entry.dtype,
                    expected: expected.unwrap_or(u64::MAX),
                    found: entry.length,
                });
            }
            let end = entry.offset.saturating_add(entry.length);
            if end > payload.len() as u64 {
                return Err(ContainerError::TruncatedPayload {
                    name: entry.name.clone(),
                    start: entry.offset,
                    end,
                    available: payload.len() as u64,
                });
            }
            spans.push((entry.offset, end, &entry.name));
            let raw = &payload[entry.offset as usize..end as usize];
            let values: Vec<f64> = match entry.dtype {
                DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                DType::U8 => {
                    let values: Vec<f64> = raw.iter().map(|b| *b as f64).collect();
                    check_binary(&entry.name, &values)?;
                    values
                }
            };
            check_finite(&entry.name, values.iter().copied())?;
            let data = Matrix::new(rows, cols, values)
                .map_err(|e| ContainerError::MalformedHeader(format!("tensor {:?}: {e}", entry.name)))?;
            tensors.insert(
                entry.name.clone(),
                Tensor {
                    dtype: entry.dtype,
                    data,
                },
            );
        }
        spans.sort();
        for pair in spans.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(ContainerError::OverlappingOffsets {
                    first: pair[0].2.to_string(),
                    second: pair[1].2.to_string(),
                });
            }
        }
        Ok(Container {
            tensors,
            metadata: header.metadata,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Writes every matrix as an `f64` tensor.
pub fn save_container(path: impl AsRef<Path>, tensors: &BTreeMap<String, Matrix>) -> Result<()> {
    let mut c = Container::new();
    for (name, m) in tensors {
        c.insert(name.clone(), Tensor::f64(m.clone()));
    }
    c.write(path)
}

/// Loads every tensor as a matrix of `f64`, whatever its stored dtype.
pub fn load_container(path: impl AsRef<Path>) -> Result<BTreeMap<String, Matrix>> {
    Ok(Container::read(path)?.tensors.into_iter().map(|(k, t)| (k, t.data)).collect())
}
