//! Binary shard format, little-endian throughout:
//!
//! ```text
//! "LBW1" | version u32 | count u32 | count × offset u64 | records | sha256(all preceding bytes)
//! record = meta_len u64 | meta JSON | n_frames u32 | height u32 | width u32 | raw RGB planes
//! ```
//! Offsets are absolute byte positions of each record.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ClipRecord;
use crate::error::{Error, Result};
use crate::world::render::Frame;

pub const SHARD_MAGIC: &[u8; 4] = b"LBW1";
pub const SHARD_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub version: u32,
    pub count: u32,
    pub offsets: Vec<u64>,
    pub total_bytes: u64,
}

pub fn encode_shard(records: &[ClipRecord]) -> Result<(Vec<u8>, ShardManifest)> {
    if records.is_empty() {
        return Err(Error::Precondition("shard needs at least one record".into()));
    }
    let mut body = Vec::new();
    let header_len = 12 + 8 * records.len();
    let mut offsets = Vec::with_capacity(records.len());
    for r in records {
        offsets.push((header_len + body.len()) as u64);
        let meta = serde_json::to_vec(r).map_err(|e| Error::Malformed(e.to_string()))?;
        body.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        body.extend_from_slice(&meta);
        let (h, w) = r.frames.first().map_or((0, 0), |f| (f.height, f.width));
        if r.frames.iter().any(|f| (f.height, f.width) != (h, w)) {
            return Err(Error::Precondition("frames within a record must share a resolution".into()));
        }
        body.extend_from_slice(&(r.frames.len() as u32).to_le_bytes());
        body.extend_from_slice(&(h as u32).to_le_bytes());
        body.extend_from_slice(&(w as u32).to_le_bytes());
        for f in &r.frames {
            body.extend_from_slice(&f.data);
        }
    }
    let mut out = Vec::with_capacity(header_len + body.len() + DIGEST_LEN);
    out.extend_from_slice(SHARD_MAGIC);
    out.extend_from_slice(&SHARD_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for o in &offsets {
        out.extend_from_slice(&o.to_le_bytes());
    }
    out.extend_from_slice(&body);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    let manifest =
        ShardManifest { version: SHARD_VERSION, count: records.len() as u32, offsets, total_bytes: out.len() as u64 };
    Ok((out, manifest))
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

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_shard(bytes: &[u8]) -> Result<Vec<ClipRecord>> {
    if bytes.len() < 8 {
        return Err(Error::Truncated("shorter than the header".into()));
    }
    if &bytes[..4] != SHARD_MAGIC {
        return Err(Error::BadMagic { expected: "LBW1" });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != SHARD_VERSION {
        return Err(Error::VersionMismatch { expected: SHARD_VERSION, found: version });
    }
    if bytes.len() < 12 + DIGEST_LEN {
        return Err(Error::Truncated("shorter than header plus checksum".into()));
    }
    let (content, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(content).as_slice() != digest {
        return Err(Error::ChecksumFailure);
    }
    let mut r = Reader { buf: content, at: 8 };
    let count = r.u32()? as usize;
    let offsets = (0..count).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let mut records = Vec::with_capacity(count);
    for off in offsets {
        r.at = usize::try_from(off).map_err(|_| Error::Malformed("offset overflow".into()))?;
        let meta_len = r.u64()? as usize;
        let meta = r.take(meta_len)?;
        let mut rec: ClipRecord = serde_json::from_slice(meta).map_err(|e| Error::Malformed(e.to_string()))?;
        let n = r.u32()? as usize;
        let (h, w) = (r.u32()? as usize, r.u32()? as usize);
        let plane = h * w * 3;
        rec.frames = (0..n)
            .map(|_| Ok(Frame { height: h, width: w, data: r.take(plane)?.to_vec() }))
            .collect::<Result<_>>()?;
        records.push(rec);
    }
    Ok(records)
}

pub fn write_shard(records: &[ClipRecord], path: &Path) -> Result<ShardManifest> {
    let (bytes, manifest) = encode_shard(records)?;
    fs::write(path, bytes)?;
    Ok(manifest)
}

pub fn read_shard(path: &Path) -> Result<Vec<ClipRecord>> {
    decode_shard(&fs::read(path)?)
}
