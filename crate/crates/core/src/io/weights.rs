//! Binary weight container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FSSD" | version u32 = 1 | count u32
//! per tensor: name_len u16 | name (UTF-8) | rank u8 | dims u32 × rank | f32 × Π dims
//! ```
//!
//! The file ends exactly after the last tensor.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::params::{Param, ParamStore};

pub const MAGIC: &[u8; 4] = b"FSSD";
pub const VERSION: u32 = 1;

pub fn encode_weights(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + store.total_elements() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(store.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, p) in store.iter() {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
        let rank = u8::try_from(p.dims.len()).map_err(|_| Error::Format(format!("rank too high: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in &p.dims {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension too large: {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end =
            self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
                Error::Format(format!("truncated file: {what} needs {n} bytes at offset {}", self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_weights(buf: &[u8]) -> Result<ParamStore> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a weight file".into()));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = c.u32("tensor count")?;
    let mut store = ParamStore::new();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(c.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
        let rank = c.take(1, "rank")?[0] as usize;
        let dims = (0..rank).map(|_| c.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let data =
            c.take(numel, &name)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        store.insert(name, Param { dims, data });
    }
    if c.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last tensor", buf.len() - c.pos)));
    }
    Ok(store)
}

pub fn save_weights(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_weights(store)?)?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ParamStore> {
    decode_weights(&std::fs::read(path)?)
}

/// Loads a weight file and installs it into `graph` after checking every
/// tensor name and shape. On error the graph is left untouched.
pub fn load_weights_into(graph: &mut ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    graph.set_params(load_weights(path)?)
}
