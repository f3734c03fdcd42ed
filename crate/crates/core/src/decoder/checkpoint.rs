//! Little-endian binary checkpoints.
//!
//! Layout: magic `ADSC`, format version, the model config as length-prefixed
//! JSON, tensor count, then per tensor its name, rank, dims and `f64` payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::model::Decoder;
use super::params::Parameters;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

const MAGIC: &[u8; 4] = b"ADSC";
const VERSION: u32 = 1;

pub fn encode<T: Scalar>(decoder: &Decoder<T>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(decoder.config()).map_err(|e| Error::Format(e.to_string()))?;
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg);
    let entries = decoder.params().entries();
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&(e.tensor.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(e.tensor.cols() as u64).to_le_bytes());
        for v in e.tensor.as_slice() {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Decoder<T>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let cfg_len = c.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(c.take(cfg_len)?).map_err(|e| Error::Format(e.to_string()))?;
    config.validate().map_err(|e| Error::Format(e.to_string()))?;

    let count = c.u32()? as usize;
    let mut named = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
        let rank = c.u32()?;
        if rank != 2 {
            return Err(Error::Format(format!("tensor {name} has rank {rank}")));
        }
        let rows = c.u64()? as usize;
        let cols = c.u64()? as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| Error::Format("tensor too large".into()))?;
        let payload = c.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = payload
            .chunks_exact(8)
            .map(|b| T::of(f64::from_le_bytes(b.try_into().unwrap())))
            .collect();
        named.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes".into()));
    }
    // Build the expected layout from the config, then fill it by name.
    let mut params = Parameters::skeleton(&config)?;
    params.load_named(named)?;
    Decoder::from_parts(config, params)
}

/// Writes to a temporary sibling and renames it into place.
pub fn save<T: Scalar>(decoder: &Decoder<T>, path: &Path) -> Result<()> {
    let bytes = encode(decoder)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Decoder<T>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
