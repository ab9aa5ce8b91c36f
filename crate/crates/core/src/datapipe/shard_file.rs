//! PBAM shard files.
//!
//! Little-endian layout:
//!
//! ```text
//! "PBAM" | version u16 = 1 | flags u16 (bit 0: targets) | record_count u32
//! per record:
//!   id_len u16, id | speaker_len u16, speaker | timestamp u64
//!   frame_count u32 | dim u16 | f32 x frame_count*dim
//!   if targets: k u16, then per frame k x (index u32, logit f32)
//! ```

use std::path::Path;

use super::topk::TopKTargets;
use super::{Record, Shard};
use crate::error::{Error, Result};
use crate::fsutil::{read_file, write_atomic};
use crate::model::Matrix;

pub const MAGIC: &[u8; 4] = b"PBAM";
pub const VERSION: u16 = 1;
pub const FLAG_TARGETS: u16 = 1;
pub const EXTENSION: &str = "pbam";

pub fn encode_shard(shard: &Shard) -> Result<Vec<u8>> {
    let with_targets = shard.records.first().is_some_and(|r| r.targets.is_some());
    let mut out = Vec::with_capacity(12 + shard.frame_count() * 40);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(if with_targets { FLAG_TARGETS } else { 0 }).to_le_bytes());
    out.extend_from_slice(&u32_field(shard.records.len(), "record count")?.to_le_bytes());
    for r in &shard.records {
        if r.targets.is_some() != with_targets {
            return Err(Error::InvalidInput(format!(
                "shard {}: record {} disagrees with the others about targets",
                shard.name, r.utterance_id
            )));
        }
        put_str(&mut out, &r.utterance_id)?;
        put_str(&mut out, &r.speaker_id)?;
        out.extend_from_slice(&r.timestamp.to_le_bytes());
        out.extend_from_slice(&u32_field(r.frames.rows(), "frame count")?.to_le_bytes());
        let dim = u16::try_from(r.frames.cols())
            .map_err(|_| Error::InvalidInput(format!("record {}: dim {} exceeds u16", r.utterance_id, r.frames.cols())))?;
        out.extend_from_slice(&dim.to_le_bytes());
        for v in r.frames.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(t) = &r.targets {
            if t.frames() != r.frames.rows() {
                return Err(Error::DimensionMismatch(format!(
                    "record {}: {} target rows for {} frames",
                    r.utterance_id,
                    t.frames(),
                    r.frames.rows()
                )));
            }
            let k = u16::try_from(t.k()).map_err(|_| Error::InvalidInput(format!("k={} exceeds u16", t.k())))?;
            out.extend_from_slice(&k.to_le_bytes());
            for (i, l) in t.indices().iter().zip(t.logits()) {
                out.extend_from_slice(&i.to_le_bytes());
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn u32_field(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidInput(format!("{what} {n} exceeds u32")))
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::InvalidInput(format!("string of {} bytes exceeds u16", s.len())))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, at: usize, reason: impl Into<String>) -> Error {
        Error::corrupt(self.path, at as u64, reason)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            self.fail(self.pos, format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let at = self.pos;
        let len = self.u16(what)? as usize;
        if len == 0 {
            return Err(self.fail(at, format!("empty {what}")));
        }
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.fail(at + 2, format!("{what} is not UTF-8")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let at = self.pos;
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.fail(at, "size overflow"))?, what)?;
        let vals: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
            return Err(self.fail(at + 4 * i, format!("non-finite {what}")));
        }
        Ok(vals)
    }
}

pub fn decode_shard(name: &str, path: &Path, buf: &[u8]) -> Result<Shard> {
    let mut r = Reader { path, buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.fail(0, "bad magic, expected PBAM"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(r.fail(4, format!("unsupported version {version}")));
    }
    let flags = r.u16("flags")?;
    if flags & !FLAG_TARGETS != 0 {
        return Err(r.fail(6, format!("unknown flag bits {flags:#06x}")));
    }
    let count = r.u32("record count")? as usize;
    // Every record needs at least 18 bytes; reject absurd counts before allocating.
    if count > buf.len() / 18 {
        return Err(r.fail(8, format!("record count {count} cannot fit in {} bytes", buf.len())));
    }
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let utterance_id = r.string("utterance id")?;
        let speaker_id = r.string("speaker id")?;
        let timestamp = r.u64("timestamp")?;
        let frame_count = r.u32("frame count")? as usize;
        let dim_at = r.pos;
        let dim = r.u16("dim")? as usize;
        if dim == 0 && frame_count > 0 {
            return Err(r.fail(dim_at, "zero dim with frames present"));
        }
        let n = frame_count.checked_mul(dim).ok_or_else(|| r.fail(dim_at, "frame block size overflow"))?;
        let frames = Matrix::new(frame_count, dim, r.f32s(n, "frame value")?)?;
        let targets = if flags & FLAG_TARGETS != 0 {
            let k_at = r.pos;
            let k = r.u16("k")? as usize;
            if k == 0 {
                return Err(r.fail(k_at, "k is zero"));
            }
            let pairs_at = r.pos;
            let m = frame_count.checked_mul(k).ok_or_else(|| r.fail(k_at, "target block size overflow"))?;
            let bytes = r.take(m.checked_mul(8).ok_or_else(|| r.fail(k_at, "target block size overflow"))?, "targets")?;
            let mut indices = Vec::with_capacity(m);
            let mut logits = Vec::with_capacity(m);
            for c in bytes.chunks_exact(8) {
                indices.push(u32::from_le_bytes(c[..4].try_into().unwrap()));
                logits.push(f32::from_le_bytes(c[4..].try_into().unwrap()));
            }
            Some(TopKTargets::new(k, indices, logits).map_err(|e| r.fail(pairs_at, e.to_string()))?)
        } else {
            None
        };
        records.push(Record { utterance_id, speaker_id, timestamp, frames, targets });
    }
    if r.pos != buf.len() {
        return Err(r.fail(r.pos, format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(Shard { name: name.to_string(), records })
}

pub fn write_shard(dir: &Path, shard: &Shard) -> Result<std::path::PathBuf> {
    let path = dir.join(format!("{}.{EXTENSION}", shard.name));
    write_atomic(&path, &encode_shard(shard)?)?;
    Ok(path)
}

pub fn read_shard(path: &Path) -> Result<Shard> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_shard(&name, path, &read_file(path)?)
}

/// Shard files in `dir`, sorted by name.
pub fn list_shards(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == EXTENSION) {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

/// Removes stale shard files so a rerun leaves exactly its own outputs.
pub fn clear_shards(dir: &Path) -> Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    for p in list_shards(dir)? {
        std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
