//! Portable tensor container used for checkpoints and dataset samples.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "SEGADPT1"
//! offset 8   u64       header length N in bytes
//! offset 16  N bytes   UTF-8 JSON header
//! offset 16+N          payload: concatenated f32 LE values
//! ```
//!
//! The header is a JSON object:
//!
//! ```json
//! {"tensors": [{"name": "...", "dtype": "f32", "shape": [..], "offset": 0}],
//!  "meta": {"key": "value"}}
//! ```
//!
//! `offset` is the byte offset of the tensor's first value relative to the
//! start of the payload. Tensors are stored in header order, back to back,
//! row-major.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SEGADPT1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
struct Header {
    tensors: Vec<Entry>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

/// Ordered named tensors plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    tensors: Vec<(String, Tensor<f32>)>,
    pub meta: BTreeMap<String, String>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Header {
            tensors: Vec::with_capacity(self.tensors.len()),
            meta: self.meta.clone(),
        };
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            header.tensors.push(Entry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 4 * t.numel() as u64;
        }
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_start = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(format!("header length {hlen} exceeds file")))?;
        let header: Header = serde_json::from_slice(&bytes[16..payload_start])
            .map_err(|e| bad(format!("header: {e}")))?;
        let payload = &bytes[payload_start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if e.dtype != "f32" {
                return Err(bad(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * n;
            if end > payload.len() {
                return Err(bad(format!("{}: payload truncated", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(e.shape, data).map_err(|err| bad(format!("{}: {err}", e.name)))?;
            tensors.push((e.name, t));
        }
        Ok(Container {
            tensors,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
