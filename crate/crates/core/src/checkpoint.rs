//! The binary container shared by decoder, encoder and classifier
//! checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes   "PFTSEGC1"
//! hlen      u64       length of the JSON header in bytes
//! header    hlen      {"kind": str, "meta": any, "tensors": [{"name", "shape", "offset"}]}
//! payload   f64 LE    tensors back to back; `offset` counts f64 elements
//! ```
//!
//! Values are stored as raw IEEE-754 bits so a load reproduces the saved
//! parameters exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PFTSEGC1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<HeaderEntry>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Checkpoint {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(TensorEntry {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|t| {
                let e = HeaderEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    offset,
                };
                offset += t.data.len();
                e
            })
            .collect();
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let hjson = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(16 + hjson.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&hjson);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], file: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::parse(file, "magic", "not a pftseg checkpoint"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let hend = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::parse(file, "header", "truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..hend]).map_err(|e| Error::parse(file, "header", e))?;
        let payload = &bytes[hend..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset * 8;
            let end = start + n * 8;
            if end > payload.len() {
                return Err(Error::parse(file, &e.name, "payload truncated"));
            }
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(TensorEntry {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        Ok(Checkpoint {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }

    pub fn expect_kind(&self, kind: &str, file: &Path) -> Result<()> {
        if self.kind != kind {
            return Err(Error::parse(
                file,
                "kind",
                format!("expected {kind}, found {}", self.kind),
            ));
        }
        Ok(())
    }
}
