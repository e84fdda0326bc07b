//! Binary checkpoint format.
//!
//! Layout (all integers little-endian `u32`):
//! `SLOTGEN1`, config length + UTF-8 config text, vocabulary length + UTF-8
//! vocabulary text, tensor count, then per tensor: name length, name bytes,
//! rank, each dimension, and the values as little-endian `f32`.

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numkernel::Tensor;
use crate::textcore::Vocabulary;

pub const MAGIC: &[u8; 8] = b"SLOTGEN1";

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Input(format!("{v} does not fit the checkpoint format")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) -> Result<()> {
    put_u32(out, b.len())?;
    out.extend_from_slice(b);
    Ok(())
}

/// Serializes the model. Values are stored as `f32`.
pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_bytes(&mut out, model.config.to_text().as_bytes())?;
    put_bytes(&mut out, model.vocab.to_text().as_bytes())?;
    put_u32(&mut out, model.store.len())?;
    for (name, t) in model.store.iter() {
        put_bytes(&mut out, name.as_bytes())?;
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for &x in t.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
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
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Version(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn text(&mut self) -> Result<&'a str> {
        let n = self.u32()?;
        std::str::from_utf8(self.take(n)?).map_err(|e| Error::Version(format!("invalid text section: {e}")))
    }
}

/// Rebuilds a model from checkpoint bytes.
pub fn from_bytes(buf: &[u8], origin: &str) -> Result<Model> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Version(format!("{origin} is not a SLOTGEN1 checkpoint")));
    }
    let config = RunConfig::parse(r.text()?, origin).map_err(|e| Error::Version(format!("config section: {e}")))?;
    let vocab = Vocabulary::from_text(r.text()?, origin).map_err(|e| Error::Version(format!("vocabulary section: {e}")))?;
    let count = r.u32()?;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.text()?.to_string();
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Version("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::new(&dims, data).map_err(|e| Error::Version(format!("tensor {name}: {e}")))?;
        named.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(Error::Version(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let mut model = Model::new(config, vocab)?;
    model.store.load_values(named)?;
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf, &path.display().to_string())
}
