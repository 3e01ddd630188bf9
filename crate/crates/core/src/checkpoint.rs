//! Binary checkpoint container: magic, JSON header, raw little-endian f32 payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use uagan_autograd::{ParamRef, Shape, Tensor};

use crate::error::{IoContext, Result, UaganError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UAGCKPT1";

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: [usize; 4],
}

/// Named tensors plus free-form metadata.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    tensors: Vec<(String, Tensor)>,
    index: BTreeMap<String, usize>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint { meta, ..Default::default() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(UaganError::Checkpoint(format!("duplicate tensor '{name}'")));
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.tensors.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i].1)
            .ok_or_else(|| UaganError::Checkpoint(format!("tensor '{name}' missing")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    /// Stores parameter values under `prefix` + parameter name.
    pub fn insert_params(&mut self, prefix: &str, params: &[ParamRef]) -> Result<()> {
        for p in params {
            self.insert(format!("{prefix}{}", p.name()), p.value())?;
        }
        Ok(())
    }

    /// Restores parameter values stored by [`Checkpoint::insert_params`].
    pub fn load_params(&self, prefix: &str, params: &[ParamRef]) -> Result<()> {
        for p in params {
            let t = self.get(&format!("{prefix}{}", p.name()))?;
            if t.shape() != p.value().shape() {
                return Err(UaganError::Checkpoint(format!(
                    "'{}' has shape {} but the model expects {}",
                    p.name(),
                    t.shape(),
                    p.value().shape()
                )));
            }
            p.set(t.clone());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(n, t)| Entry { name: n.clone(), shape: t.shape().0 }).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| UaganError::Checkpoint(e.to_string()))?;
        let payload: usize = self.tensors.iter().map(|(_, t)| t.numel() * 4).sum();
        let mut buf = Vec::with_capacity(16 + json.len() + payload);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| UaganError::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| UaganError::Checkpoint(e.to_string()))?;
        let mut ck = Checkpoint::new(header.meta);
        let mut pos = 16 + hlen;
        for e in header.tensors {
            let shape = Shape(e.shape);
            let n = shape.numel() * 4;
            let raw = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated payload"))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            ck.insert(e.name, Tensor::from_vec(shape, data)?)?;
            pos += n;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(ck)
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        Checkpoint::from_bytes(&bytes).map_err(|e| UaganError::Checkpoint(format!("{}: {e}", path.display())))
    }
}

/// Write-then-rename so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).at(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).at(&tmp)?;
    f.write_all(bytes).at(&tmp)?;
    f.sync_all().at(&tmp)?;
    drop(f);
    fs::rename(&tmp, path).at(path)
}
