//! `EVCW` v1 weight archive.

use super::ModelWeights;
use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::ndiff::Tensor;

const MAGIC: &[u8; 4] = b"EVCW";
const VERSION: u32 = 1;

pub fn write_weights(weights: &ModelWeights) -> Result<Vec<u8>> {
    let mut w = ByteWriter::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(weights.len() as u32);
    for (name, t) in weights.entries() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("tensor name `{name}` is too long")))?;
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| Error::Format(format!("tensor `{name}` has too many dimensions")))?;
        w.u16(name_len);
        w.bytes(name.as_bytes());
        w.u8(rank);
        for &d in t.shape() {
            w.u32(d as u32);
        }
        for &v in t.data() {
            w.f64(v);
        }
    }
    Ok(w.into_inner())
}

pub fn read_weights(bytes: &[u8]) -> Result<ModelWeights> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Format("missing EVCW magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported EVCW version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        entries.push((name, Tensor::new(shape, data)?));
    }
    r.finish()?;
    ModelWeights::from_entries(entries)
}
