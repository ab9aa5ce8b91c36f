//! PBMD model files.
//!
//! Little-endian layout:
//!
//! ```text
//! "PBMD" | version u16 = 1 | flags u16 = 0
//! input_dim u32 | hidden_count u16 | hidden u32 x hidden_count | num_classes u32
//! segment_count u32, per segment: name_len u16, name, offset u64, len u64
//! param_count u64 | f32 x param_count
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::{read_file, write_atomic};
use crate::model::{ParameterVector, ReferenceModel, Segment, Topology};

pub const MAGIC: &[u8; 4] = b"PBMD";
pub const VERSION: u16 = 1;

pub fn encode_model(model: &ReferenceModel) -> Vec<u8> {
    let topo = model.topology();
    let params = model.params();
    let mut out = Vec::with_capacity(64 + params.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(topo.input_dim as u32).to_le_bytes());
    out.extend_from_slice(&(topo.hidden.len() as u16).to_le_bytes());
    for &h in &topo.hidden {
        out.extend_from_slice(&(h as u32).to_le_bytes());
    }
    out.extend_from_slice(&(topo.num_classes as u32).to_le_bytes());
    out.extend_from_slice(&(params.segments().len() as u32).to_le_bytes());
    for s in params.segments() {
        out.extend_from_slice(&(s.name.len() as u16).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        out.extend_from_slice(&(s.offset as u64).to_le_bytes());
        out.extend_from_slice(&(s.len as u64).to_le_bytes());
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.pos.checked_add(n).filter(|&e| e <= self.buf.len()) {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::corrupt(self.path, self.pos as u64, format!("truncated {what}"))),
        }
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
}

pub fn decode_model(path: &Path, buf: &[u8]) -> Result<ReferenceModel> {
    let mut c = Cursor { path, buf, pos: 0 };
    let bad = |at: usize, reason: String| Error::corrupt(path, at as u64, reason);
    if c.take(4, "magic")? != MAGIC {
        return Err(bad(0, "bad magic, expected PBMD".into()));
    }
    let version = c.u16("version")?;
    if version != VERSION {
        return Err(bad(4, format!("unsupported version {version}")));
    }
    if c.u16("flags")? != 0 {
        return Err(bad(6, "unknown flags".into()));
    }
    let input_dim = c.u32("input dim")? as usize;
    let hidden_count = c.u16("hidden count")? as usize;
    let hidden = (0..hidden_count)
        .map(|_| c.u32("hidden size").map(|h| h as usize))
        .collect::<Result<Vec<_>>>()?;
    let num_classes = c.u32("class count")? as usize;
    let topo_end = c.pos;
    let topology = Topology::new(input_dim, hidden, num_classes).map_err(|e| bad(8, e.to_string()))?;

    let seg_count = c.u32("segment count")? as usize;
    if seg_count > buf.len() / 18 {
        return Err(bad(topo_end, format!("segment count {seg_count} cannot fit")));
    }
    let mut segments = Vec::with_capacity(seg_count);
    for _ in 0..seg_count {
        let at = c.pos;
        let len = c.u16("segment name")? as usize;
        let name = String::from_utf8(c.take(len, "segment name")?.to_vec())
            .map_err(|_| bad(at + 2, "segment name is not UTF-8".into()))?;
        let offset = c.u64("segment offset")? as usize;
        let len = c.u64("segment length")? as usize;
        segments.push(Segment { name, offset, len });
    }
    if segments != topology.segments() {
        return Err(bad(topo_end, "segment table does not match the topology".into()));
    }
    let count_at = c.pos;
    let count = c.u64("parameter count")? as usize;
    if count != topology.param_count() {
        return Err(bad(count_at, format!("{count} parameters, topology needs {}", topology.param_count())));
    }
    let values_at = c.pos;
    let bytes = c.take(count.checked_mul(4).ok_or_else(|| bad(count_at, "size overflow".into()))?, "parameters")?;
    let values: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(bad(values_at + 4 * i, "non-finite parameter".into()));
    }
    if c.pos != buf.len() {
        return Err(bad(c.pos, format!("{} trailing bytes", buf.len() - c.pos)));
    }
    let params = ParameterVector::new(values, segments).map_err(|e| bad(values_at, e.to_string()))?;
    ReferenceModel::from_parts(topology, params)
}

pub fn save_model(path: &Path, model: &ReferenceModel) -> Result<()> {
    write_atomic(path, &encode_model(model))
}

pub fn load_model(path: &Path) -> Result<ReferenceModel> {
    if !path.exists() {
        return Err(Error::missing(path, "model file not found"));
    }
    decode_model(path, &read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bitwise() {
        let m = ReferenceModel::init(Topology::new(6, vec![5, 4], 3).unwrap(), 9);
        let bytes = encode_model(&m);
        let back = decode_model(Path::new("m.pbmd"), &bytes).unwrap();
        assert!(back.params().bitwise_eq(m.params()));
        assert_eq!(back.topology(), m.topology());
        assert_eq!(encode_model(&back), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let m = ReferenceModel::init(Topology::new(2, vec![3], 2).unwrap(), 1);
        let bytes = encode_model(&m);
        let p = Path::new("m.pbmd");
        assert!(decode_model(p, &bytes[..bytes.len() - 1]).is_err());
        let mut b = bytes.clone();
        b[0] = 0;
        assert!(matches!(decode_model(p, &b), Err(Error::Corrupt { offset: 0, .. })));
        let mut b = bytes;
        let n = b.len();
        b[n - 4..].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(decode_model(p, &b), Err(Error::Corrupt { .. })));
    }
}
