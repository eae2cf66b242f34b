//! Checkpoint file format (version 1, little-endian):
//!
//! ```text
//! magic        8 bytes   "FRELCKPT"
//! version      u32       1
//! header_len   u32       byte length of the UTF-8 JSON header
//! header       bytes     architecture/preprocessing description
//! count        u32       number of tensors
//! per tensor:
//!   name_len   u32, name bytes (UTF-8)
//!   kind       u8        0 = trainable, 1 = buffer
//!   rank       u32, then rank x u64 extents
//!   data       numel x f64
//! ```
//!
//! Tensors appear in registration order, so saving the same store twice
//! produces identical bytes.

use std::fs;
use std::path::Path;

use crate::diff::{ParamKind, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FRELCKPT";
pub const VERSION: u32 = 1;

pub fn encode(header: &str, store: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.entries() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.push(match p.kind {
            ParamKind::Trainable => 0,
            ParamKind::Buffer => 1,
        });
        buf.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(String, ParamStore)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header = r.string(hlen)?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = r.string(nlen)?;
        let kind = match r.take(1)?[0] {
            0 => ParamKind::Trainable,
            1 => ParamKind::Buffer,
            k => return Err(Error::Checkpoint(format!("unknown tensor kind {k}"))),
        };
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` too large")))?;
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.register(name, kind, Tensor::new(&shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((header, store))
}

pub fn save(path: impl AsRef<Path>, header: &str, store: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(header, store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(String, ParamStore)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
