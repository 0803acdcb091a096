//! Single-file tensor archive.
//!
//! Layout: the magic `SGCK`, a little-endian `u64` manifest length, the JSON
//! manifest (tensor names, shapes, dtype, byte offsets and free-form
//! metadata), then the concatenated little-endian `f64` payloads.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sg_autodiff::Tensor;

use crate::error::{Error, Result};
use crate::networks::{Architecture, NetworkParams};
use crate::params::{InitSpec, ParamSet};

pub const MAGIC: &[u8; 4] = b"SGCK";
pub const DTYPE: &str = "f64-le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload section.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tensors: Vec<TensorEntry>,
    pub metadata: serde_json::Value,
}

/// Named tensors plus metadata, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub metadata: serde_json::Value,
    pub tensors: IndexMap<String, Tensor>,
}

impl Archive {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            metadata,
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    /// Adds every tensor of `set` under `prefix/`.
    pub fn insert_set(&mut self, prefix: &str, set: &ParamSet) -> Result<()> {
        for (name, t) in set.iter() {
            self.insert(format!("{prefix}/{name}"), t.clone())?;
        }
        Ok(())
    }

    /// Overwrites every tensor of `set` from `prefix/`, checking shapes.
    pub fn fill_set(&self, prefix: &str, set: &mut ParamSet) -> Result<()> {
        for (name, t) in set.iter_mut() {
            let key = format!("{prefix}/{name}");
            let src = self
                .tensors
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{key}` has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        let expected = set.len();
        let found = self.tensors.keys().filter(|k| k.starts_with(&format!("{prefix}/"))).count();
        if found != expected {
            return Err(Error::Checkpoint(format!(
                "`{prefix}` holds {found} tensors, expected {expected}"
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: DTYPE.into(),
                offset,
            });
            offset += 8 * t.len() as u64;
        }
        let manifest = serde_json::to_vec(&Manifest {
            tensors: entries,
            metadata: self.metadata.clone(),
        })
        .expect("manifest serialises");
        let mut out = Vec::with_capacity(12 + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint archive (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(12..12usize.saturating_add(len)).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
        let payload = &bytes[12 + len..];
        let mut archive = Archive::new(manifest.metadata);
        let mut expected_offset = 0u64;
        for e in manifest.tensors {
            if e.dtype != DTYPE {
                return Err(Error::Checkpoint(format!("tensor `{}` has unsupported dtype {}", e.name, e.dtype)));
            }
            if e.offset != expected_offset {
                return Err(Error::Checkpoint(format!("tensor `{}` has a non-contiguous offset", e.name)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let raw = payload
                .get(start..start + 8 * n)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` is truncated", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            archive.insert(e.name, Tensor::from_vec(&e.shape, data))?;
            expected_offset += 8 * n as u64;
        }
        if expected_offset as usize != payload.len() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Serialize, Deserialize)]
struct NetworkMeta {
    arch: Architecture,
    init: InitSpec,
}

/// Archives one network on its own.
pub fn network_to_archive(net: &NetworkParams) -> Result<Archive> {
    let meta = serde_json::to_value(NetworkMeta {
        arch: net.arch,
        init: net.init,
    })
    .expect("network metadata serialises");
    let mut a = Archive::new(meta);
    a.insert_set("params", &net.tensors)?;
    Ok(a)
}

pub fn network_from_archive(a: &Archive) -> Result<NetworkParams> {
    let meta: NetworkMeta = serde_json::from_value(a.metadata.clone())
        .map_err(|e| Error::Checkpoint(format!("bad network metadata: {e}")))?;
    let mut net = match meta.arch {
        Architecture::UNet(s) => NetworkParams::unet(s, meta.init)?,
        Architecture::PatchGan(s) => NetworkParams::patch_gan(s, meta.init)?,
    };
    a.fill_set("params", &mut net.tensors)?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut a = Archive::new(serde_json::json!({"k": 1}));
        a.insert("x", Tensor::from_vec(&[2], vec![1.5, -0.0])).unwrap();
        let bytes = a.to_bytes();
        assert_eq!(Archive::from_bytes(&bytes).unwrap(), a);
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Archive::from_bytes(&wrong).is_err());
    }
}
