//! Little-endian tensor container shared by checkpoints (`XAVT`) and
//! attention dumps (`XAVA`).
//!
//! Layout: 4-byte magic, `u32` version (1), `u64` tensor count, then per
//! tensor `u32` name length, UTF-8 name, `u8` trainable flag, `u32` rank,
//! `rank x u64` extents and row-major `f32` data. Entries are written in
//! lexicographic name order.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"XAVT";
pub const DUMP_MAGIC: [u8; 4] = *b"XAVA";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub trainable: bool,
    pub value: Tensor<f32>,
}

pub fn encode(magic: [u8; 4], entries: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut sorted: Vec<&NamedTensor> = entries.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    if sorted.windows(2).any(|w| w[0].name == w[1].name) {
        return Err(Error::format("duplicate tensor names"));
    }
    let mut out = Vec::new();
    out.extend_from_slice(&magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(sorted.len() as u64).to_le_bytes());
    for e in sorted {
        let name = e.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.push(u8::from(e.trainable));
        out.extend_from_slice(&(e.value.rank() as u32).to_le_bytes());
        for &x in e.value.shape() {
            out.extend_from_slice(&(x as u64).to_le_bytes());
        }
        for &v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(magic: [u8; 4], bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != magic {
        return Err(Error::format(format!(
            "bad magic, expected {}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported version {version}")));
    }
    let count = r.u64()?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format("tensor name is not UTF-8"))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::format(format!("duplicate tensor name {name}")));
        }
        let trainable = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::format(format!("bad trainable flag {b}"))),
        };
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::format("tensor too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(NamedTensor {
            name,
            trainable,
            value: Tensor::new(shape, data).map_err(|e| Error::format(e.to_string()))?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::format("trailing bytes after last tensor"));
    }
    Ok(out)
}

pub fn write_file(path: &Path, magic: [u8; 4], entries: &[NamedTensor]) -> Result<()> {
    let bytes = encode(magic, entries)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_file(path: &Path, magic: [u8; 4]) -> Result<Vec<NamedTensor>> {
    decode(magic, &fs::read(path)?)
}

/// SHA-256 over the canonical little-endian form of one tensor (rank,
/// extents, data), hex encoded. Independent of host byte order.
pub fn checksum(t: &Tensor<f32>) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update((t.rank() as u32).to_le_bytes());
    for &x in t.shape() {
        h.update((x as u64).to_le_bytes());
    }
    for &v in t.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<NamedTensor> {
        vec![
            NamedTensor {
                name: "b".into(),
                trainable: true,
                value: Tensor::new(vec![2], vec![1.5, -2.0]).unwrap(),
            },
            NamedTensor {
                name: "a".into(),
                trainable: false,
                value: Tensor::new(vec![1, 2], vec![0.25, 3.0]).unwrap(),
            },
        ]
    }

    #[test]
    fn roundtrip_sorts_names() {
        let bytes = encode(CHECKPOINT_MAGIC, &sample()).unwrap();
        let back = decode(CHECKPOINT_MAGIC, &bytes).unwrap();
        assert_eq!(back[0].name, "a");
        assert_eq!(encode(CHECKPOINT_MAGIC, &back).unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_inputs() {
        let bytes = encode(CHECKPOINT_MAGIC, &sample()).unwrap();
        assert!(decode(DUMP_MAGIC, &bytes).is_err());
        assert!(decode(CHECKPOINT_MAGIC, &bytes[..bytes.len() - 1]).is_err());
        let mut v = bytes.clone();
        v[4] = 2;
        assert!(decode(CHECKPOINT_MAGIC, &v).is_err());
        let mut dup = sample();
        dup[1].name = "b".into();
        assert!(encode(CHECKPOINT_MAGIC, &dup).is_err());
    }
}

