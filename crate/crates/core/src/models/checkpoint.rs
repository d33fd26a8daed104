//! Binary checkpoint codec for [`SeqModel`].
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "ANTKCKPT"
//! version u32
//! scalar  u8 width (4 = f32, 8 = f64)
//! header  u32 length + UTF-8 JSON (config, vocab sizes, goals, fingerprint, meta)
//! params  u64 count + count * width bytes
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::seq::{SeqModel, SeqModelConfig, TrainingMeta};
use super::ActionModel;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"ANTKCKPT";
pub const VERSION: u32 = 1;

/// Checkpoints are the model itself; the alias names the on-disk role.
pub type Checkpoint<F> = SeqModel<F>;

#[derive(Serialize, Deserialize)]
struct Header {
    config: SeqModelConfig,
    num_verbs: usize,
    num_nouns: usize,
    goals: Vec<String>,
    taxonomy_fingerprint: String,
    meta: TrainingMeta,
}

impl<F: Scalar> SeqModel<F> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config().clone(),
            num_verbs: self.num_verbs(),
            num_nouns: self.num_nouns(),
            goals: self.goals().to_vec(),
            taxonomy_fingerprint: self.taxonomy_fingerprint().to_string(),
            meta: self.meta().clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(32 + json.len() + self.num_params() * F::WIDTH);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(F::WIDTH as u8);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.num_params() as u64).to_le_bytes());
        for &p in self.params() {
            p.write_le(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, at: 0 };
        if cur.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(cur.array()?);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let width = cur.take(1)?[0] as usize;
        if width != F::WIDTH {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint stores {width}-byte scalars, loader expects {} ({})",
                F::WIDTH,
                F::TAG
            )));
        }
        let hlen = u32::from_le_bytes(cur.array()?) as usize;
        let header: Header =
            serde_json::from_slice(cur.take(hlen)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let count = u64::from_le_bytes(cur.array()?) as usize;
        let raw = cur.take(count.checked_mul(width).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        if cur.at != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - cur.at)));
        }
        let params = raw.chunks_exact(width).map(F::read_le).collect();
        SeqModel::from_parts(
            header.config,
            header.num_verbs,
            header.num_nouns,
            header.goals,
            header.taxonomy_fingerprint,
            header.meta,
            params,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint("truncated".into()));
        };
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}
