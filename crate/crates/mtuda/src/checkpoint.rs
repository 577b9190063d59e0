//! Binary checkpoint container: a JSON header followed by named fp64 tensor
//! records. Layout (all integers little-endian):
//!
//! ```text
//! magic "MTUDA1"
//! u32 header_len, header bytes (JSON)
//! u32 record_count
//! per record: u32 name_len, name bytes, u32 rank, u32 dims[rank], f64 values
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"MTUDA1";

/// One named tensor payload.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

/// Decoded checkpoint: free-form JSON header plus ordered tensor records.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: String,
    pub records: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn record(&self, name: &str) -> Result<&TensorRecord> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor \"{name}\"")))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn take_u32(buf: &[u8], pos: &mut usize) -> Result<usize> {
    let end = *pos + 4;
    if end > buf.len() {
        return Err(Error::Format("truncated checkpoint: missing u32".into()));
    }
    let v = u32::from_le_bytes(buf[*pos..end].try_into().unwrap());
    *pos = end;
    Ok(v as usize)
}

fn take_bytes<'a>(buf: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = *pos + n;
    if end > buf.len() {
        return Err(Error::Format(format!("truncated checkpoint: wanted {n} bytes")));
    }
    let s = &buf[*pos..end];
    *pos = end;
    Ok(s)
}

pub fn encode(cp: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, cp.header.len());
    out.extend_from_slice(cp.header.as_bytes());
    put_u32(&mut out, cp.records.len());
    for r in &cp.records {
        put_u32(&mut out, r.name.len());
        out.extend_from_slice(r.name.as_bytes());
        put_u32(&mut out, r.dims.len());
        for d in &r.dims {
            put_u32(&mut out, *d);
        }
        debug_assert_eq!(r.dims.iter().product::<usize>(), r.values.len());
        for v in &r.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    if buf.len() < 6 || &buf[..6] != MAGIC {
        return Err(Error::Format("bad checkpoint magic (expected MTUDA1)".into()));
    }
    let mut pos = 6;
    let header_len = take_u32(buf, &mut pos)?;
    let header = String::from_utf8(take_bytes(buf, &mut pos, header_len)?.to_vec())
        .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
    let count = take_u32(buf, &mut pos)?;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = take_u32(buf, &mut pos)?;
        let name = String::from_utf8(take_bytes(buf, &mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = take_u32(buf, &mut pos)?;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(take_u32(buf, &mut pos)?);
        }
        let numel: usize = dims.iter().product();
        let values = take_bytes(buf, &mut pos, numel * 8)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        records.push(TensorRecord { name, dims, values });
    }
    if pos != buf.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} trailing bytes",
            buf.len() - pos
        )));
    }
    Ok(Checkpoint { header, records })
}

pub fn save(cp: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode(cp))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn sample() -> Checkpoint {
        let mut rng = Rng::new(123);
        let records = (0..5)
            .map(|i| {
                let dims = vec![1 + rng.below(4), 1 + rng.below(6)];
                let n: usize = dims.iter().product();
                TensorRecord {
                    name: format!("layer.{i}.weight"),
                    dims,
                    values: (0..n).map(|_| rng.normal()).collect(),
                }
            })
            .collect();
        Checkpoint { header: r#"{"iteration":42,"seed":7}"#.to_string(), records }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let cp = sample();
        let bytes = encode(&cp);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.header, cp.header);
        assert_eq!(back.records.len(), cp.records.len());
        for (a, b) in cp.records.iter().zip(&back.records) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.dims, b.dims);
            assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        // Re-encode equality is the bitwise round-trip contract.
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        let cp = sample();
        save(&cp, &path).unwrap();
        assert_eq!(load(&path).unwrap(), cp);
    }

    #[test]
    fn lookup_by_name() {
        let cp = sample();
        assert!(cp.record("layer.3.weight").is_ok());
        assert!(cp.record("nope").is_err());
    }

    #[test]
    fn corrupt_buffers_rejected() {
        let cp = sample();
        let bytes = encode(&cp);
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(decode(&bad_magic).is_err());
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(decode(&trailing).is_err());
        let mut bad_utf8 = bytes;
        // First record name starts right after magic+4+header+4+4.
        let name_at = 6 + 4 + cp.header.len() + 4 + 4;
        bad_utf8[name_at] = 0xff;
        assert!(decode(&bad_utf8).is_err());
    }
}
