//! Binary parameter checkpoints.
//!
//! Layout, all little-endian: `b"MSNC"`, `u16` version, `u32` entry count, then per
//! entry `u16` name length, UTF-8 name, `u8` rank, `rank × u32` dims and `f32` values;
//! finally a CRC32 of every preceding byte.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"MSNC";
pub const VERSION: u16 = 1;

/// One named tensor as stored on disk (values widened back to `f64`).
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor,
}

pub fn encode(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(entries.len()).map_err(|_| Error::arg("too many checkpoint entries"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::arg(format!("parameter name too long: {}", e.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        let rank = u8::try_from(e.tensor.rank()).map_err(|_| Error::arg(format!("{}: rank too large", e.name)))?;
        out.push(rank);
        for &d in e.tensor.shape() {
            let d = u32::try_from(d).map_err(|_| Error::arg(format!("{}: dimension too large", e.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in e.tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Data("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Data("not a checkpoint (bad magic)".into()));
    }
    if bytes.len() < 14 {
        return Err(Error::Data("checkpoint corrupt".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().expect("4 bytes")) {
        return Err(Error::Data("checkpoint corrupt".into()));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Config(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Data("checkpoint name is not UTF-8".into()))?.to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Data(format!("duplicate checkpoint entry {name}")));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Data("checkpoint corrupt".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        entries.push(Entry { name, tensor: Tensor::new(shape, data)? });
    }
    if r.pos != body.len() {
        return Err(Error::Data("trailing bytes in checkpoint".into()));
    }
    Ok(entries)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let entries: Vec<Entry> = store.iter().map(|p| Entry { name: p.name.clone(), tensor: p.tensor.clone() }).collect();
    write_atomic(path, &encode(&entries)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<Entry>> {
    let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    decode(&bytes)
}

/// Loads values into a store built with the same configuration. Every parameter must be
/// present with a matching shape; extra entries are rejected too.
pub fn load_checkpoint(store: &mut ParamStore, path: &Path) -> Result<()> {
    let entries = read_checkpoint(path)?;
    if entries.len() != store.len() {
        return Err(Error::State(format!("checkpoint has {} tensors, model has {}", entries.len(), store.len())));
    }
    for e in &entries {
        let id = store.id(&e.name).ok_or_else(|| Error::State(format!("checkpoint parameter {} not in model", e.name)))?;
        let p = store.get_mut(id);
        if p.tensor.shape() != e.tensor.shape() {
            return Err(Error::State(format!("parameter {}: shape {:?} vs checkpoint {:?}", e.name, p.tensor.shape(), e.tensor.shape())));
        }
        p.tensor.data_mut().copy_from_slice(e.tensor.data());
    }
    Ok(())
}
