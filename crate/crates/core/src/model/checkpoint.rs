//! Checkpoint container.
//!
//! ```text
//! offset  size  content
//! 0       8     magic  b"QMATCHCK"
//! 8       4     format version, u32 little-endian
//! 12      8     header length H, u64 little-endian
//! 20      H     UTF-8 JSON header
//! 20+H    …     array payloads, concatenated in header order,
//!               each element little-endian f32 or f64 (header "dtype")
//! ```
//!
//! The header is `{"arrays":[{"name":..,"shape":[..]},..],"dtype":"f64",
//! "format_version":1,"meta":{..}}` with keys in sorted order, so the same
//! checkpoint always serializes to the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EmaParams, EncoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"QMATCHCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray<T: Real> {
    pub name: String,
    pub tensor: Tensor<T>,
}

impl<T: Real> NamedArray<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            tensor,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: EncoderConfig,
    pub seed: u64,
    pub step: u64,
    pub algorithm: String,
    /// Path or identifier of the preprocessing state the model was trained on.
    pub preprocess_ref: Option<String>,
    pub has_classifier: bool,
    pub ema_decay: Option<f64>,
    /// Algorithm-specific scalars (queue cursor, hyperparameters, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Model, optional EMA teacher and any auxiliary arrays (optimizer moments,
/// queue storage, pretext heads).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Real> {
    pub meta: CheckpointMeta,
    pub params: ModelParams<T>,
    pub ema: Option<EmaParams<T>>,
    pub arrays: Vec<NamedArray<T>>,
}

impl<T: Real> Checkpoint<T> {
    pub fn array(&self, name: &str) -> Option<&Tensor<T>> {
        self.arrays.iter().find(|a| a.name == name).map(|a| &a.tensor)
    }

    /// Auxiliary arrays under `prefix`, with the prefix stripped.
    pub fn arrays_with_prefix(&self, prefix: &str) -> Vec<NamedArray<T>> {
        self.arrays
            .iter()
            .filter_map(|a| {
                a.name
                    .strip_prefix(prefix)
                    .map(|n| NamedArray::new(n, a.tensor.clone()))
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arrays: Vec<ArrayEntry>,
    dtype: DType,
    format_version: u32,
    meta: CheckpointMeta,
}

const STUDENT: &str = "student/";
const TEACHER: &str = "teacher/";
const AUX: &str = "aux/";

pub fn encode_checkpoint<T: Real>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    let mut arrays = ckpt.params.to_arrays(STUDENT);
    if let Some(ema) = &ckpt.ema {
        arrays.extend(ema.params().to_arrays(TEACHER));
    }
    arrays.extend(
        ckpt.arrays
            .iter()
            .map(|a| NamedArray::new(format!("{AUX}{}", a.name), a.tensor.clone())),
    );
    let mut meta = ckpt.meta.clone();
    meta.has_classifier = ckpt.params.classifier.is_some();
    meta.ema_decay = ckpt.ema.as_ref().map(EmaParams::decay);
    let header = Header {
        arrays: arrays
            .iter()
            .map(|a| ArrayEntry {
                name: a.name.clone(),
                shape: a.tensor.shape().to_vec(),
            })
            .collect(),
        dtype: T::DTYPE,
        format_version: FORMAT_VERSION,
        meta,
    };
    let header = serde_json::to_vec(&header)?;
    let payload: usize = arrays.iter().map(|a| a.tensor.numel()).sum();
    let mut out = Vec::with_capacity(20 + header.len() + payload * T::DTYPE.size_of());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for a in &arrays {
        for &v in a.tensor.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8], expected: Option<&EncoderConfig>) -> Result<Checkpoint<T>> {
    let corrupt = |what: &str| Error::Checkpoint(format!("corrupt checkpoint: {what}"));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..header_end]).map_err(|e| corrupt(&e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "header format version {} is not supported",
            header.format_version
        )));
    }
    if header.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} values, caller asked for {}",
            header.dtype.name(),
            T::DTYPE.name()
        )));
    }
    if let Some(cfg) = expected {
        if cfg != &header.meta.config {
            return Err(Error::Config(format!(
                "checkpoint encoder config {:?} does not match requested {:?}",
                header.meta.config, cfg
            )));
        }
    }
    let width = T::DTYPE.size_of();
    let mut offset = header_end;
    let mut student = BTreeMap::new();
    let mut teacher = BTreeMap::new();
    let mut aux = Vec::new();
    for entry in header.arrays {
        let n: usize = entry.shape.iter().product();
        let end = offset
            .checked_add(n * width)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("truncated payload"))?;
        let data = bytes[offset..end].chunks_exact(width).map(T::read_le).collect();
        offset = end;
        let tensor = Tensor::new(entry.shape, data)?;
        if let Some(n) = entry.name.strip_prefix(STUDENT) {
            student.insert(n.to_string(), tensor);
        } else if let Some(n) = entry.name.strip_prefix(TEACHER) {
            teacher.insert(n.to_string(), tensor);
        } else if let Some(n) = entry.name.strip_prefix(AUX) {
            aux.push(NamedArray::new(n, tensor));
        } else {
            return Err(corrupt(&format!("unknown array {}", entry.name)));
        }
    }
    if offset != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    let meta = header.meta;
    let params = ModelParams::from_arrays(&meta.config, &student, "", meta.has_classifier)?;
    let ema = match meta.ema_decay {
        Some(decay) => {
            let shadow = ModelParams::from_arrays(&meta.config, &teacher, "", false)?;
            Some(EmaParams::from_parts(shadow, decay)?)
        }
        None => None,
    };
    Ok(Checkpoint {
        meta,
        params,
        ema,
        arrays: aux,
    })
}

pub fn save_checkpoint<T: Real>(path: impl AsRef<Path>, ckpt: &Checkpoint<T>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(ckpt)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint; when `expected` is given the stored encoder config must
/// match it exactly.
pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>, expected: Option<&EncoderConfig>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected)
}
