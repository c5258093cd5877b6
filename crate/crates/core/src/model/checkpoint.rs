//! Checkpoint format, little-endian throughout:
//!
//! ```text
//! "LBWC" | version u32 | meta_len u64 | meta JSON | count u32
//!        | count × (name_len u16 | name | rows u32 | cols u32 | rows·cols f32)
//!        | sha256(all preceding bytes)
//! ```
//! A file that does not start with the magic reports version 0.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LBWC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `teacher`, `student`, `agent` or any caller-defined role.
    pub kind: String,
    pub config: ModelConfig,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn save_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let meta = serde_json::to_vec(&ckpt.meta).expect("metadata serializes");
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, t) in ckpt.params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Truncated(format!("need {n} bytes at offset {}", self.at)))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::VersionMismatch { expected: CHECKPOINT_VERSION, found: 0 });
    }
    let mut r = Reader { buf: bytes, at: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { expected: CHECKPOINT_VERSION, found: version });
    }
    if bytes.len() < 8 + 32 {
        return Err(Error::Truncated("missing checksum".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::ChecksumFailure);
    }
    let mut r = Reader { buf: body, at: 8 };
    let meta_len = usize::try_from(r.u64()?).map_err(|_| Error::Malformed("metadata length".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Malformed(e.to_string()))?;
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Malformed(e.to_string()))?.to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(4)).ok_or_else(|| Error::Malformed("shape".into()))?;
        let data = r.take(n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        params.insert(name, Tensor::from_vec(rows, cols, data));
    }
    if r.at != body.len() {
        return Err(Error::Malformed(format!("{} trailing bytes", body.len() - r.at)));
    }
    Ok(Checkpoint { meta, params })
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, save_checkpoint(ckpt))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("a.w", Tensor::from_vec(2, 2, vec![1.0, -2.5, f32::MIN_POSITIVE, 3.0e7]));
        params.insert("b", Tensor::zeros(1, 3));
        Checkpoint { meta: CheckpointMeta { kind: "student".into(), config: ModelConfig::default(), extra: serde_json::json!({"step": 3}) }, params }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        assert_eq!(load_checkpoint(&save_checkpoint(&c)).unwrap(), c);
    }

    #[test]
    fn distinct_failures() {
        let bytes = save_checkpoint(&sample());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(load_checkpoint(&bad), Err(Error::VersionMismatch { found: 0, .. })));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(load_checkpoint(&v2), Err(Error::VersionMismatch { found: 2, .. })));
        let mut flip = bytes.clone();
        flip[20] ^= 1;
        assert!(matches!(load_checkpoint(&flip), Err(Error::ChecksumFailure)));
        assert!(matches!(load_checkpoint(&bytes[..6]), Err(Error::Truncated(_))));
    }
}
