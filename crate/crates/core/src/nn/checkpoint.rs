//! Binary checkpoint container.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic      8 bytes   "RULCKPT1"
//! meta_len   u64
//! meta       meta_len bytes of UTF-8 JSON (CheckpointMeta)
//! n_arrays   u32
//! per array:
//!   name_len u16, name bytes (canonical parameter name)
//!   rank     u8, then rank x u64 dims
//!   data     prod(dims) x f64
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ModelConfig, ModelParams};
use crate::error::{Result, RulError};

const MAGIC: &[u8; 8] = b"RULCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub seed: u64,
    pub feature_names: Vec<String>,
    pub window: usize,
    pub max_rul: f64,
    pub trainable_count: usize,
}

pub fn encode_checkpoint(params: &ModelParams, meta: &CheckpointMeta) -> Vec<u8> {
    let meta_json = serde_json::to_vec(meta).expect("metadata serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_json);
    let arrays = params.named_arrays();
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, t) in arrays {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    let bad = |m: &str| RulError::format(origin, m);
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8) != Some(MAGIC.as_slice()) {
        return Err(bad("bad magic"));
    }
    let meta_len = cur.u64().ok_or_else(|| bad("truncated header"))? as usize;
    let meta_bytes = cur.take(meta_len).ok_or_else(|| bad("truncated metadata"))?;
    let meta: CheckpointMeta =
        serde_json::from_slice(meta_bytes).map_err(|e| bad(&format!("metadata: {e}")))?;
    let mut params = ModelParams::zeros(&meta.model)?;
    let count = cur
        .take(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| bad("truncated array count"))? as usize;
    let mut slots = params.named_arrays_mut();
    if count != slots.len() {
        return Err(bad(&format!("expected {} arrays, found {count}", slots.len())));
    }
    let mut seen = vec![false; slots.len()];
    for _ in 0..count {
        let name_len = cur
            .take(2)
            .map(|b| u16::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| bad("truncated name"))? as usize;
        let name = cur
            .take(name_len)
            .and_then(|b| std::str::from_utf8(b).ok())
            .ok_or_else(|| bad("invalid name"))?;
        let rank = cur.take(1).ok_or_else(|| bad("truncated rank"))?[0] as usize;
        let dims: Vec<usize> = (0..rank)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Option<_>>()
            .ok_or_else(|| bad("truncated dims"))?;
        let idx = slots
            .iter()
            .position(|(n, _)| *n == name)
            .ok_or_else(|| bad(&format!("unknown array {name:?}")))?;
        let target = &mut slots[idx].1;
        if target.shape() != dims.as_slice() {
            return Err(bad(&format!(
                "{name}: shape {dims:?} does not match architecture {:?}",
                target.shape()
            )));
        }
        let data = cur.take(8 * target.len()).ok_or_else(|| bad("truncated data"))?;
        for (v, chunk) in target.data_mut().iter_mut().zip(data.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        seen[idx] = true;
    }
    if cur.pos != bytes.len() || seen.contains(&false) {
        return Err(bad("trailing bytes or missing arrays"));
    }
    drop(slots);
    Ok((params, meta))
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams, meta: &CheckpointMeta) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params, meta)).map_err(|e| RulError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams, CheckpointMeta)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| RulError::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
