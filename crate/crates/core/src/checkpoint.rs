//! Binary checkpoint container.
//!
//! Layout: `b"QSE1"`, a little-endian `u64` header length, the UTF-8 JSON
//! header, then every parameter as raw little-endian `f32` in manifest order.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

pub const MAGIC: &[u8; 4] = b"QSE1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the block, relative to the start of the data section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: Header,
    blocks: Vec<Vec<f32>>,
}

pub fn save(path: impl AsRef<Path>, kind: &str, config: serde_json::Value, store: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    let mut params = Vec::with_capacity(store.len());
    let mut data = Vec::with_capacity(store.num_scalars() * 4);
    for (name, t) in store.iter() {
        params.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: data.len(),
        });
        for v in t.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        config,
        params,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn corrupt(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {what}", path.display()))
}

impl Checkpoint {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => corrupt(path, m),
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("missing QSE1 magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if hlen > body.len() {
            return Err(Error::Checkpoint(format!(
                "truncated header: {hlen} bytes declared, {} present",
                body.len()
            )));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} unsupported (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        let data = &body[hlen..];
        let mut blocks = Vec::with_capacity(header.params.len());
        let mut expected_offset = 0usize;
        for p in &header.params {
            let n: usize = p.shape.iter().product();
            if p.offset != expected_offset {
                return Err(Error::Checkpoint(format!(
                    "parameter {} at offset {}, expected {expected_offset}",
                    p.name, p.offset
                )));
            }
            let end = p.offset + 4 * n;
            if end > data.len() {
                return Err(Error::Checkpoint(format!(
                    "truncated data: parameter {} needs bytes {}..{end}, file has {}",
                    p.name,
                    p.offset,
                    data.len()
                )));
            }
            blocks.push(
                data[p.offset..end]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            );
            expected_offset = end;
        }
        if expected_offset != data.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last parameter",
                data.len() - expected_offset
            )));
        }
        Ok(Checkpoint { header, blocks })
    }

    /// Deserializes the config block, checking the model kind first.
    pub fn config_as<T: DeserializeOwned>(&self, kind: &str) -> Result<T> {
        if self.header.kind != kind {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds a {:?} model, expected {kind:?}",
                self.header.kind
            )));
        }
        serde_json::from_value(self.header.config.clone())
            .map_err(|e| Error::Checkpoint(format!("bad {kind} config: {e}")))
    }

    /// Copies every stored block into `store`. Both sides must hold
    /// exactly the same parameter names and shapes.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.header.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.header.params.len(),
                store.len()
            )));
        }
        for (p, block) in self.header.params.iter().zip(&self.blocks) {
            store.set_values(&p.name, &p.shape, block.clone())?;
        }
        Ok(())
    }
}
