//! Binary checkpoint files.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! "TPMM" | version u32 = 1 | family u8 | V u32 | k u32 | d u32 | h u32
//! | max_response_len u32 | iteration_index u32 | param_count u64
//! | param_count x f64
//! ```
//!
//! The label is not persisted; loaded checkpoints are labelled `"loaded"`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::policy::{Family, ModelSpec, PolicyCheckpoint};

pub const MAGIC: &[u8; 4] = b"TPMM";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 1 + 6 * 4 + 8;

pub fn encode(ckpt: &PolicyCheckpoint<f64>) -> Vec<u8> {
    let spec = ckpt.spec();
    let params = ckpt.params();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(spec.family.tag());
    for field in [
        spec.vocab_size,
        spec.context_window,
        spec.embed_dim,
        spec.hidden_dim,
        spec.max_response_len,
    ] {
        out.extend_from_slice(&(field as u32).to_le_bytes());
    }
    out.extend_from_slice(&ckpt.iteration_index().to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<PolicyCheckpoint<f64>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, expected \"TPMM\"".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let tag = r.take(1, "family")?[0];
    let family = Family::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown family tag {tag}")))?;
    let vocab_size = r.u32("vocab_size")? as usize;
    let context_window = r.u32("context_window")? as usize;
    let embed_dim = r.u32("embed_dim")? as usize;
    let hidden_dim = r.u32("hidden_dim")? as usize;
    let max_response_len = r.u32("max_response_len")? as usize;
    let iteration_index = r.u32("iteration_index")?;
    let param_count = r.u64("param_count")?;

    let spec = ModelSpec {
        family,
        vocab_size,
        context_window,
        embed_dim,
        hidden_dim,
        max_response_len,
    };
    spec.validate().map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if param_count != spec.param_count() as u64 {
        return Err(Error::Format(format!(
            "header param_count {param_count} does not match spec ({})",
            spec.param_count()
        )));
    }
    let payload = bytes.len() - r.pos;
    if payload as u64 != param_count * 8 {
        return Err(Error::Format(format!(
            "payload is {payload} bytes, expected {}",
            param_count * 8
        )));
    }
    let params = r.bytes[r.pos..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    PolicyCheckpoint::new(spec, params, iteration_index, "loaded").map_err(|e| Error::Format(e.to_string()))
}

pub fn write(path: &Path, ckpt: &PolicyCheckpoint<f64>) -> Result<()> {
    fs::write(path, encode(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<PolicyCheckpoint<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Encodes and decodes a checkpoint.
pub fn param_roundtrip(ckpt: &PolicyCheckpoint<f64>) -> Result<PolicyCheckpoint<f64>> {
    decode(&encode(ckpt))
}
