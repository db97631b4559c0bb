//! `SLRCKPT1` checkpoints: an 8-byte magic followed by named tensors until EOF.
//!
//! Each record is `u32 name_len | name (UTF-8) | u32 rank | u64 dims[rank] | f32 data[]`,
//! all little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{LayerSet, Tensor};

pub const MAGIC: &[u8; 8] = b"SLRCKPT1";

pub fn encode(layers: &LayerSet) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in layers.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<LayerSet> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("missing SLRCKPT1 magic".into()));
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let mut layers = LayerSet::new();
    while r.pos < bytes.len() {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(r.u64("dims")? as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("dims of `{name}` overflow")))?;
        let payload = r.take(count.saturating_mul(4), "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(dims, data)
            .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        if layers.insert(name.clone(), tensor).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
    }
    Ok(layers)
}

pub fn save(path: &Path, layers: &LayerSet) -> Result<()> {
    fs::write(path, encode(layers)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load(path: &Path) -> Result<LayerSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(&bytes)
}
