//! Single-file checkpoint archive.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` manifest length, the
//! manifest as JSON, then every blob listed in the manifest as little-endian
//! `f64` values in manifest order. All integers are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vapdiff_core::autograd::ParamStore;
use vapdiff_core::vaps::sha256_hex;

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"VAPDCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub group: String,
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub step: u64,
    pub config_hash: String,
    pub config: RunConfig,
    pub class_names: Vec<String>,
    pub image_shape: (usize, usize, usize),
    pub latent_scale: f64,
    pub optimizer_step: u64,
    /// Latest training metrics, by name.
    pub metrics: BTreeMap<String, f64>,
    pub blobs: Vec<BlobEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    /// One buffer per manifest blob entry.
    pub data: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn new(manifest: CheckpointManifest) -> Self {
        Self { manifest: CheckpointManifest { blobs: Vec::new(), ..manifest }, data: Vec::new() }
    }

    pub fn push_store(&mut self, group: &str, store: &ParamStore) {
        for e in store.entries() {
            self.push(group, &e.name, e.rows, e.cols, e.data.clone());
        }
    }

    /// Buffers aligned with a store's entries, such as optimizer moments.
    pub fn push_aligned(&mut self, group: &str, store: &ParamStore, buffers: &[Vec<f64>]) {
        for (e, b) in store.entries().iter().zip(buffers) {
            self.push(group, &e.name, e.rows, e.cols, b.clone());
        }
    }

    pub fn push(&mut self, group: &str, name: &str, rows: usize, cols: usize, data: Vec<f64>) {
        assert_eq!(data.len(), rows * cols, "blob size");
        self.manifest.blobs.push(BlobEntry { group: group.into(), name: name.into(), rows, cols });
        self.data.push(data);
    }

    pub fn has_group(&self, group: &str) -> bool {
        self.manifest.blobs.iter().any(|b| b.group == group)
    }

    /// Buffers of `group` matched by name and shape against `store`'s entries.
    pub fn group_for(&self, group: &str, store: &ParamStore) -> Result<Vec<Vec<f64>>> {
        let index: BTreeMap<&str, usize> =
            self.manifest.blobs.iter().enumerate().filter(|(_, b)| b.group == group).map(|(i, b)| (b.name.as_str(), i)).collect();
        if index.len() != store.len() {
            return Err(Error::config(format!(
                "checkpoint group {group} has {} tensors, the model has {}",
                index.len(),
                store.len()
            )));
        }
        store
            .entries()
            .iter()
            .map(|e| {
                let &i = index
                    .get(e.name.as_str())
                    .ok_or_else(|| Error::config(format!("checkpoint group {group} lacks tensor {}", e.name)))?;
                let b = &self.manifest.blobs[i];
                if (b.rows, b.cols) != (e.rows, e.cols) {
                    return Err(Error::config(format!(
                        "tensor {group}/{} is {}x{} in the checkpoint and {}x{} in the model",
                        e.name, b.rows, b.cols, e.rows, e.cols
                    )));
                }
                Ok(self.data[i].clone())
            })
            .collect()
    }

    pub fn load_store(&self, group: &str, store: &mut ParamStore) -> Result<()> {
        let buffers = self.group_for(group, store)?;
        for (e, b) in store.entries_mut().iter_mut().zip(buffers) {
            e.data = b;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(20 + manifest.len() + 8 * self.data.iter().map(Vec::len).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for blob in &self.data {
            for v in blob {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Parse { path: path.to_path_buf(), line: 0, reason };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint archive".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + len).ok_or_else(|| bad("truncated manifest".into()))?;
        let manifest: CheckpointManifest = serde_json::from_slice(body).map_err(|e| bad(format!("manifest: {e}")))?;
        let mut offset = 20 + len;
        let mut data = Vec::with_capacity(manifest.blobs.len());
        for b in &manifest.blobs {
            let n = b.rows * b.cols;
            let raw = bytes.get(offset..offset + 8 * n).ok_or_else(|| bad(format!("truncated blob {}/{}", b.group, b.name)))?;
            data.push(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect());
            offset += 8 * n;
        }
        if offset != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - offset)));
        }
        Ok(Self { manifest, data })
    }

    /// Writes through a temporary sibling file and a rename.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(Error::io(&tmp))?;
        fs::rename(&tmp, path).map_err(Error::io(path))?;
        Ok(sha256_hex(&bytes))
    }

    /// Returns the checkpoint and the SHA-256 of the file.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Ok((Self::from_bytes(&bytes, path)?, sha256_hex(&bytes)))
    }

    /// Refuses a checkpoint trained under different settings unless overridden.
    pub fn check_config(&self, cfg: &RunConfig, allow_mismatch: bool) -> Result<()> {
        let want = cfg.config_hash();
        if self.manifest.config_hash != want {
            if !allow_mismatch {
                return Err(Error::config(format!(
                    "checkpoint config hash {} does not match the run config ({want}); pass --allow-config-mismatch to load anyway",
                    &self.manifest.config_hash[..12.min(self.manifest.config_hash.len())]
                )));
            }
            log::warn!("loading checkpoint despite config hash mismatch");
        }
        Ok(())
    }
}
