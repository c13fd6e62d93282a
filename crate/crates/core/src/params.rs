//! Named parameter tensors and the checkpoint archive.
//!
//! Archive layout (all integers little-endian):
//!
//! ```text
//! "KMFC" | u32 format version | u32 metadata length | metadata JSON
//! u32 tensor count
//! per tensor: u16 name length | name | u8 rank | u32 dims[rank] | f32 data
//! ```
//!
//! Tensors are written in name order, so loading and re-saving an archive
//! reproduces it byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec_nets::ModelConfig;
use crate::error::{Error, Result};
use crate::interpolation::InterpolatorSpec;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"KMFC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub nonlinearity: String,
    pub model: Option<ModelConfig>,
    pub interpolator: Option<InterpolatorSpec>,
    /// Base lambda the codec was trained with.
    pub lambda: Option<f64>,
    pub train_steps: u64,
}

impl Default for CheckpointMeta {
    fn default() -> Self {
        CheckpointMeta {
            format_version: CHECKPOINT_VERSION,
            nonlinearity: format!("leaky_relu({})", crate::ops::LEAKY_SLOPE),
            model: None,
            interpolator: None,
            lambda: None,
            train_steps: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    pub meta: CheckpointMeta,
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new(meta: CheckpointMeta) -> Self {
        ParameterStore {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count of tensors whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Copy every tensor under `prefix` from `other`, overwriting.
    pub fn merge_prefix(&mut self, other: &ParameterStore, prefix: &str) {
        for (k, t) in other.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.tensors.insert(k.clone(), t.clone());
        }
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&t.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let n = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..n {
            let nl = r.u16()? as usize;
            let name = String::from_utf8(r.take(nl)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let count: usize = shape.iter().product();
            let t = Tensor::from_le_bytes(&shape, r.take(count * 4)?)?;
            tensors.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after tensors".into()));
        }
        Ok(ParameterStore { meta, tensors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let b = fs::read(path).map_err(|e| Error::io(path, e))?;
        ParameterStore::from_bytes(&b)
    }

    /// Write atomically: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Checkpoint id stored in bitstream headers: the first four bytes of
    /// the archive's SHA-256, little-endian.
    pub fn model_id(&self) -> Result<u32> {
        let digest = Sha256::digest(self.to_bytes()?);
        Ok(u32::from_le_bytes([digest[0], digest[1], digest[2], digest[3]]))
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.b.len() {
            return Err(Error::Checkpoint(format!(
                "archive truncated at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let s = self.take(4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }

    fn u16(&mut self) -> Result<u16> {
        let s = self.take(2)?;
        Ok(u16::from_le_bytes([s[0], s[1]]))
    }
}
