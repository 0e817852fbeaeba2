//! Self-describing tensor container used for network and training
//! checkpoints.
//!
//! Layout: the 8-byte magic `HDANCKPT`, a little-endian `u32` format
//! version, a `u64` header length, a JSON header, then every tensor's data
//! as little-endian `f64` in header order.

use std::io::{Read, Write};
use std::path::Path;

use hdan_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::{Network, NetworkConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HDANCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_container(path: &Path, c: &Container) -> Result<()> {
    let header = Header {
        meta: c.meta.clone(),
        tensors: c
            .tensors
            .iter()
            .map(|(name, t)| Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(MAGIC)?;
    write(&VERSION.to_le_bytes())?;
    write(&(json.len() as u64).to_le_bytes())?;
    write(&json)?;
    for (_, t) in &c.tensors {
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        write(&buf)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<Container> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(20..20usize.saturating_add(len))
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
    let mut at = 20 + len;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = bytes
            .get(at..at + n * 8)
            .ok_or_else(|| bad(format!("truncated data for {}", e.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((e.name, Tensor::from_vec(&e.shape, data)?));
        at += n * 8;
    }
    if at != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(Container {
        meta: header.meta,
        tensors,
    })
}

impl Network {
    /// Parameters and running statistics keyed by name.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.tensor.clone()))
            .collect()
    }

    /// Rebuild from a configuration and a full set of named tensors.
    pub fn from_named_tensors(cfg: NetworkConfig, tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut net = Network::build(cfg, 0)?;
        let mut seen = vec![false; net.store.len()];
        for (name, t) in tensors {
            let id = net
                .store
                .id(name)
                .ok_or_else(|| bad(format!("unexpected tensor {name} for this configuration")))?;
            let slot = net.store.tensor_mut(id);
            if slot.shape() != t.shape() {
                return Err(bad(format!(
                    "tensor {name} has shape {:?}, configuration expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
            seen[id.index()] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            let name = &net
                .store
                .iter()
                .nth(missing)
                .expect("index in range")
                .1
                .name;
            return Err(bad(format!("checkpoint lacks tensor {name}")));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "kind": "network", "config": self.cfg });
        write_container(
            path,
            &Container {
                meta,
                tensors: self.named_tensors(),
            },
        )
    }

    /// Load a network from either a network or a training checkpoint.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(read_container(path)?)
    }

    /// Rebuild from a decoded container of either kind, ignoring any
    /// optimizer state.
    pub fn from_container(c: Container) -> Result<Self> {
        let cfg = c
            .meta
            .get("config")
            .or_else(|| c.meta.get("network"))
            .ok_or_else(|| bad("checkpoint has no network configuration"))?;
        let cfg: NetworkConfig =
            serde_json::from_value(cfg.clone()).map_err(|e| bad(e.to_string()))?;
        let params: Vec<(String, Tensor)> = c
            .tensors
            .into_iter()
            .filter(|(n, _)| !n.starts_with("optim."))
            .collect();
        Self::from_named_tensors(cfg, &params)
    }
}
