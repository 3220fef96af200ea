//! Parameter checkpoint container.
//!
//! Layout: the 8-byte magic `PFCKPT01`, a little-endian `u64` giving the
//! length of a UTF-8 JSON index, the index itself, then the raw little-endian
//! `f64` payload. The index maps each parameter name to its shape, weight
//! decay and byte offset into the payload, and carries an opaque `config`
//! value so a reader can check dimensions before loading.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PFCKPT01";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct Entry {
    shape: Vec<usize>,
    offset: u64,
    #[serde(default)]
    weight_decay: f64,
    /// Insertion position in the store.
    order: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Index {
    tensors: BTreeMap<String, Entry>,
    #[serde(default)]
    config: serde_json::Value,
}

/// Parameters plus the model configuration they were created with.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub config: serde_json::Value,
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &ParamStore, config: &serde_json::Value) -> Result<()> {
    let mut tensors = BTreeMap::new();
    let mut offset = 0u64;
    for (order, (_, p)) in params.iter().enumerate() {
        tensors.insert(
            p.name.clone(),
            Entry {
                shape: p.value.shape().to_vec(),
                offset,
                weight_decay: p.weight_decay,
                order,
            },
        );
        offset += 8 * p.value.len() as u64;
    }
    let index = serde_json::to_vec(&Index {
        tensors,
        config: config.clone(),
    })?;
    let io = |e| Error::io("<checkpoint>", e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(index.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&index).map_err(io)?;
    for (_, p) in params.iter() {
        let mut buf = Vec::with_capacity(8 * p.value.len());
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let io = |e| Error::io("<checkpoint>", e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a parameter checkpoint (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io)?;
    let mut index = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut index).map_err(io)?;
    let index: Index = serde_json::from_slice(&index)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(io)?;

    let mut entries: Vec<(&String, &Entry)> = index.tensors.iter().collect();
    entries.sort_by_key(|(_, e)| e.order);
    let mut params = ParamStore::new();
    for (name, e) in entries {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 8 * n;
        if end > payload.len() {
            return Err(Error::Format(format!("tensor `{name}` extends past the payload")));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.add(name.clone(), Tensor::new(e.shape.clone(), data)?, e.weight_decay)?;
    }
    Ok(Checkpoint {
        params,
        config: index.config,
    })
}

pub fn save_checkpoint(path: &Path, params: &ParamStore, config: &serde_json::Value) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params, config)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(bytes.as_slice())
}
