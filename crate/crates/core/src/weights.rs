//! Named parameter container and its `YRW1` file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "YRW1" | version: u32 | manifest_len: u64 | manifest (UTF-8 JSON)
//! | zero padding to a 64-byte boundary | data section
//! ```
//!
//! The manifest lists `{name, shape, dtype, offset}` per tensor; `offset`
//! is relative to the start of the data section and always a multiple of
//! 64, and each blob is `numel` little-endian `f32`s.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"YRW1";
pub const FORMAT_VERSION: u32 = 1;
pub const ALIGN: u64 = 64;
const HEADER_LEN: u64 = 4 + 4 + 8;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    tensors: IndexMap<String, Arc<Tensor>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: [usize; 4],
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<ManifestEntry>,
}

pub fn align_up(v: u64) -> u64 {
    v.div_ceil(ALIGN) * ALIGN
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), Arc::new(t));
    }

    pub fn insert_arc(&mut self, name: impl Into<String>, t: Arc<Tensor>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Tensor>> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Arc<Tensor>> {
        self.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Arc<Tensor>> {
        self.tensors.shift_remove(name)
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.tensors.retain(|k, _| keep(k));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<Tensor>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total scalar count of tensors whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Manifest that [`WeightStore::to_bytes`] would write.
    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let mut offset = 0u64;
        self.tensors
            .iter()
            .map(|(name, t)| {
                let e = ManifestEntry {
                    name: name.clone(),
                    shape: t.shape().0,
                    dtype: "f32".to_string(),
                    offset,
                };
                offset = align_up(offset + 4 * t.numel() as u64);
                e
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            tensors: self.manifest(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let data_start = align_up(HEADER_LEN + json.len() as u64);
        let mut out = Vec::with_capacity(data_start as usize + 4 * self.total_count() + 64 * self.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.resize(data_start as usize, 0);
        for (entry, t) in manifest.tensors.iter().zip(self.tensors.values()) {
            out.resize((data_start + entry.offset) as usize, 0);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated("header".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < HEADER_LEN as usize {
            return Err(Error::Truncated("header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::BadVersion(version));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let mend = HEADER_LEN
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| Error::Truncated("manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN as usize..mend as usize])
            .map_err(|e| Error::Manifest(e.to_string()))?;
        let data_start = align_up(mend);

        let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(manifest.tensors.len());
        let mut store = WeightStore::new();
        for e in &manifest.tensors {
            if e.dtype != "f32" {
                return Err(Error::Manifest(format!("`{}`: unsupported dtype {}", e.name, e.dtype)));
            }
            if e.offset % ALIGN != 0 {
                return Err(Error::MisalignedOffset {
                    name: e.name.clone(),
                    offset: e.offset,
                });
            }
            let shape = Shape(e.shape);
            let nbytes = 4 * shape.numel() as u64;
            let start = data_start
                .checked_add(e.offset)
                .ok_or_else(|| Error::Truncated(e.name.clone()))?;
            let end = start
                .checked_add(nbytes)
                .filter(|&end| end <= bytes.len() as u64)
                .ok_or_else(|| Error::Truncated(format!("blob `{}` extends past end of file", e.name)))?;
            if store.contains(&e.name) {
                return Err(Error::Manifest(format!("duplicate name `{}`", e.name)));
            }
            spans.push((start, end, &e.name));
            let data = bytes[start as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert(e.name.clone(), Tensor::from_vec(shape, data)?);
        }
        spans.sort_by_key(|s| s.0);
        for pair in spans.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(Error::OverlappingOffsets(pair[1].2.to_string()));
            }
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
