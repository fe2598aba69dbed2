//! Binary checkpoint format. All integers are little-endian:
//!
//! ```text
//! magic        8 bytes   "SVSACKPT"
//! version      u32
//! config_hash  u64       model configuration + phoneme vocabulary
//! step         u64       optimizer steps taken
//! meta_len     u32
//! meta         meta_len bytes of UTF-8 JSON (epoch, model, vocab, history)
//! count        u32       number of tensors
//! count times:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   rows       u32
//!   cols       u32
//!   values     rows * cols f32, row-major
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::trainer::TrainHistory;
use super::{Result, TrainError};
use crate::nn::ModelConfig;
use crate::tensor::Tensor2;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SVSACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub model: ModelConfig,
    pub vocab: Vec<String>,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub step: u64,
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor2)>,
}

/// First eight bytes of the SHA-256 of the model configuration and the
/// vocabulary tokens.
pub fn config_hash(model: &ModelConfig, vocab: &[String]) -> u64 {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(model).expect("model config serializes"));
    for t in vocab {
        h.update((t.len() as u64).to_le_bytes());
        h.update(t.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("eight bytes"))
}

fn incompatible(m: impl Into<String>) -> TrainError {
    TrainError::Compatibility(m.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() < n {
            return Err(incompatible("checkpoint is truncated"));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| incompatible("invalid UTF-8 in checkpoint"))
    }
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor2> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols as u32).to_le_bytes());
            for &v in &t.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes };
        if r.take(8).map_err(|_| incompatible("not a checkpoint"))? != CHECKPOINT_MAGIC {
            return Err(incompatible("bad magic bytes"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(incompatible(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let stored_hash = r.u64()?;
        let step = r.u64()?;
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| incompatible(format!("metadata: {e}")))?;
        if config_hash(&meta.model, &meta.vocab) != stored_hash {
            return Err(incompatible("configuration hash does not match the stored configuration"));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = r.string(len)?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let raw = r.take(rows * cols * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")) as f64)
                .collect();
            tensors.push((name, Tensor2::from_vec(rows, cols, data)));
        }
        if !r.bytes.is_empty() {
            return Err(incompatible("trailing bytes after the last tensor"));
        }
        Ok(Self {
            config_hash: stored_hash,
            step,
            meta,
            tensors,
        })
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks the configuration hash against `expected`.
    pub fn load_expecting(path: &Path, expected: u64) -> Result<Self> {
        let c = Self::load(path)?;
        if c.config_hash != expected {
            return Err(incompatible(format!(
                "configuration hash {:016x} does not match {expected:016x}",
                c.config_hash
            )));
        }
        Ok(c)
    }
}
