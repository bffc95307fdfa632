//! Uniform `B`-bit quantization of values in `[0, 1]`, its straight-through
//! gradient, and MSB-first bit packing of the feedback payload.

use crate::error::{config, contract, Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::ndiff::{Graph, Tensor, Var};

pub const MAX_BITS: u32 = 8;
/// Inputs further than this outside `[0, 1]` are counted as out of range.
pub const RANGE_SLACK: f64 = 1e-6;
const FILE_MAGIC: &[u8; 4] = b"EVCB";
const FILE_VERSION: u32 = 1;

fn check_bits(bits: u32) -> Result<()> {
    if !(1..=MAX_BITS).contains(&bits) {
        return Err(config(format!("quantization bits must be in 1..={MAX_BITS}, got {bits}")));
    }
    Ok(())
}

/// Quantizer output plus the number of inputs that needed clamping.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub indices: Vec<u8>,
    pub out_of_range: usize,
}

/// `index = min(floor(v * 2^B), 2^B - 1)` after clamping to `[0, 1]`.
pub fn quantize_uniform(v: &[f64], bits: u32) -> Result<Quantized> {
    check_bits(bits)?;
    let levels = (1u32 << bits) as f64;
    let top = (1u32 << bits) - 1;
    let mut out_of_range = 0;
    let mut indices = Vec::with_capacity(v.len());
    for &x in v {
        if !x.is_finite() {
            return Err(Error::Numeric("quantizer input".into()));
        }
        if x < -RANGE_SLACK || x > 1.0 + RANGE_SLACK {
            out_of_range += 1;
        }
        let idx = ((x.clamp(0.0, 1.0) * levels).floor() as u32).min(top);
        indices.push(idx as u8);
    }
    Ok(Quantized { indices, out_of_range })
}

/// Bin centers: `(index + 0.5) / 2^B`.
pub fn dequantize_uniform(indices: &[u8], bits: u32) -> Result<Vec<f64>> {
    check_bits(bits)?;
    let levels = 1u32 << bits;
    indices
        .iter()
        .map(|&i| {
            if u32::from(i) >= levels {
                Err(contract(format!("index {i} out of range for {bits}-bit quantizer")))
            } else {
                Ok((f64::from(i) + 0.5) / f64::from(levels))
            }
        })
        .collect()
}

/// Backward rule of the quantize/dequantize pair: identity.
pub fn ste_gradient(upstream: &[f64]) -> Vec<f64> {
    upstream.to_vec()
}

/// Quantize-dequantize on the graph with a straight-through backward pass.
/// Returns the dequantized node and the out-of-range count.
pub fn quantize_ste(g: &mut Graph, x: Var, bits: u32) -> Result<(Var, usize)> {
    let q = quantize_uniform(g.value(x).data(), bits)?;
    let deq = dequantize_uniform(&q.indices, bits)?;
    let fwd = Tensor::new(g.shape(x).to_vec(), deq)?;
    Ok((g.straight_through(x, fwd)?, q.out_of_range))
}

/// Fixed-length bit vector.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Bitstream {
    bits: Vec<bool>,
}

impl Bitstream {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn flip(&mut self, i: usize) {
        self.bits[i] = !self.bits[i];
    }

    /// `value` as `width` bits, most significant first.
    pub fn from_uint(value: u64, width: usize) -> Self {
        Self { bits: (0..width).rev().map(|b| (value >> b) & 1 == 1).collect() }
    }

    /// Interprets the stream as a big-endian unsigned integer.
    pub fn to_uint(&self) -> u64 {
        self.bits.iter().fold(0, |acc, &b| (acc << 1) | u64::from(b))
    }

    pub fn concat(&self, other: &Bitstream) -> Bitstream {
        let mut bits = self.bits.clone();
        bits.extend_from_slice(&other.bits);
        Bitstream { bits }
    }

    pub fn split_at(&self, at: usize) -> (Bitstream, Bitstream) {
        let (a, b) = self.bits.split_at(at);
        (Bitstream::new(a.to_vec()), Bitstream::new(b.to_vec()))
    }

    /// MSB-first bytes, zero-padded to a byte boundary.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.bits
            .chunks(8)
            .map(|chunk| chunk.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | (u8::from(b) << (7 - i))))
            .collect()
    }

    pub fn from_bytes(bytes: &[u8], len: usize) -> Result<Self> {
        if bytes.len() != len.div_ceil(8) {
            return Err(contract(format!("{} bytes cannot hold exactly {len} bits", bytes.len())));
        }
        let bits = (0..len).map(|i| (bytes[i / 8] >> (7 - i % 8)) & 1 == 1).collect();
        Ok(Self { bits })
    }
}

/// Concatenates `bits`-wide indices, MSB first.
pub fn pack_bits(indices: &[u8], bits: u32) -> Result<Bitstream> {
    check_bits(bits)?;
    let mut out = Vec::with_capacity(indices.len() * bits as usize);
    for &i in indices {
        if u32::from(i) >= 1 << bits {
            return Err(contract(format!("index {i} does not fit in {bits} bits")));
        }
        out.extend((0..bits).rev().map(|b| (i >> b) & 1 == 1));
    }
    Ok(Bitstream::new(out))
}

pub fn unpack_bits(stream: &Bitstream, bits: u32) -> Result<Vec<u8>> {
    check_bits(bits)?;
    if stream.len() % bits as usize != 0 {
        return Err(contract(format!("{} bits is not a multiple of {bits}", stream.len())));
    }
    Ok(stream
        .bits()
        .chunks(bits as usize)
        .map(|c| c.iter().fold(0u8, |acc, &b| (acc << 1) | u8::from(b)))
        .collect())
}

/// `EVCB` v1 file: header then `ceil(M/8)` bytes per stream.
pub fn write_bitstreams(streams: &[Bitstream], total_bits: usize) -> Result<Vec<u8>> {
    let mut w = ByteWriter::default();
    w.bytes(FILE_MAGIC);
    w.u32(FILE_VERSION);
    w.u32(streams.len() as u32);
    w.u32(total_bits as u32);
    for (i, s) in streams.iter().enumerate() {
        if s.len() != total_bits {
            return Err(contract(format!("stream {i} has {} bits, expected {total_bits}", s.len())));
        }
        w.bytes(&s.to_bytes());
    }
    Ok(w.into_inner())
}

pub fn read_bitstreams(bytes: &[u8]) -> Result<(Vec<Bitstream>, usize)> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != FILE_MAGIC {
        return Err(Error::Format("missing EVCB magic".into()));
    }
    let version = r.u32()?;
    if version != FILE_VERSION {
        return Err(Error::Format(format!("unsupported EVCB version {version}")));
    }
    let n = r.u32()? as usize;
    let m = r.u32()? as usize;
    let per = m.div_ceil(8);
    let streams = (0..n)
        .map(|_| Bitstream::from_bytes(r.take(per)?, m))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok((streams, m))
}
