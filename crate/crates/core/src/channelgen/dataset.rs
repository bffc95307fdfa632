use num_complex::Complex64;
use rand::seq::SliceRandom;

use super::{extract_csi, synth_freq_channel, ChannelParams, CsiSample};
use crate::error::{config, contract, Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::rng::{substream, Domain};

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;
const MAGIC: &[u8; 4] = b"EVCS";
const VERSION: u32 = 1;

/// Ordered CSI samples with a deterministic train/validation split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<CsiSample>,
    split_seed: u64,
    train_fraction: f64,
}

impl Dataset {
    pub fn new(samples: Vec<CsiSample>, split_seed: u64, train_fraction: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(config("dataset needs at least one sample"));
        }
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(config("train_fraction must lie in [0, 1]"));
        }
        let (nt, nsb) = (samples[0].n_tx(), samples[0].n_subband());
        if samples.iter().any(|s| s.n_tx() != nt || s.n_subband() != nsb) {
            return Err(contract("dataset samples have inconsistent shapes"));
        }
        Ok(Self { samples, split_seed, train_fraction })
    }

    pub fn samples(&self) -> &[CsiSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_tx(&self) -> usize {
        self.samples[0].n_tx()
    }

    pub fn n_subband(&self) -> usize {
        self.samples[0].n_subband()
    }

    pub fn split_seed(&self) -> u64 {
        self.split_seed
    }

    pub fn train_fraction(&self) -> f64 {
        self.train_fraction
    }

    pub fn with_split(mut self, split_seed: u64, train_fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(config("train_fraction must lie in [0, 1]"));
        }
        self.split_seed = split_seed;
        self.train_fraction = train_fraction;
        Ok(self)
    }

    /// Sorted train and validation index lists. Disjoint and exhaustive.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        let n = self.samples.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut substream(self.split_seed, Domain::Split, n as u64));
        let n_train = ((n as f64) * self.train_fraction).round() as usize;
        let mut train = order[..n_train].to_vec();
        let mut val = order[n_train..].to_vec();
        train.sort_unstable();
        val.sort_unstable();
        (train, val)
    }

    pub fn train(&self) -> Vec<&CsiSample> {
        self.split().0.into_iter().map(|i| &self.samples[i]).collect()
    }

    pub fn validation(&self) -> Vec<&CsiSample> {
        self.split().1.into_iter().map(|i| &self.samples[i]).collect()
    }

    /// Serializes to the `EVCS` v1 layout (f32 little-endian entries).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(self.samples.len() as u32);
        w.u32(self.n_tx() as u32);
        w.u32(self.n_subband() as u32);
        for s in &self.samples {
            for z in s.as_slice() {
                w.f32(z.re as f32);
                w.f32(z.im as f32);
            }
        }
        w.into_inner()
    }

    /// Parses an `EVCS` v1 payload. Columns are renormalized in double
    /// precision after widening from f32.
    pub fn from_bytes(bytes: &[u8], split_seed: u64, train_fraction: f64) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("missing EVCS magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported EVCS version {version}")));
        }
        let n = r.u32()? as usize;
        let nt = r.u32()? as usize;
        let nsb = r.u32()? as usize;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let mut data = Vec::with_capacity(nt * nsb);
            for _ in 0..nt * nsb {
                let re = r.f32()? as f64;
                let im = r.f32()? as f64;
                data.push(Complex64::new(re, im));
            }
            let mut s = CsiSample::new(nt, nsb, data)?;
            s.normalize_columns()?;
            samples.push(s);
        }
        r.finish()?;
        Self::new(samples, split_seed, train_fraction)
    }
}

/// Generates `n_samples` CSI samples; sample `i` depends only on `(params, master_seed, i)`.
pub fn build_dataset(params: &ChannelParams, n_samples: usize, master_seed: u64) -> Result<Dataset> {
    if n_samples == 0 {
        return Err(config("n_samples must be at least 1"));
    }
    params.validate()?;
    let samples = (0..n_samples)
        .map(|i| extract_csi(&synth_freq_channel(params, master_seed, i as u64)?))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, master_seed, DEFAULT_TRAIN_FRACTION)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_is_byte_reproducible() {
        let p = ChannelParams::default();
        let a = build_dataset(&p, 10, 7).unwrap().to_bytes();
        let b = build_dataset(&p, 10, 7).unwrap().to_bytes();
        assert_eq!(a, b);
        assert_eq!(&a[..4], b"EVCS");
        assert_eq!(a.len(), 20 + 10 * 8 * 12 * 8);
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let p = ChannelParams { n_tx: 2, n_subband: 2, ..Default::default() };
        let ds = build_dataset(&p, 100, 3).unwrap();
        let (train, val) = ds.split();
        assert_eq!(train.len(), 80);
        assert_eq!(val.len(), 20);
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(ds.split(), ds.split());
    }

    #[test]
    fn single_entry_regenerates_independently() {
        let p = ChannelParams::default();
        let ds = build_dataset(&p, 8, 42).unwrap();
        let alone = extract_csi(&synth_freq_channel(&p, 42, 5).unwrap()).unwrap();
        assert_eq!(ds.samples()[5], alone);
    }

    #[test]
    fn zero_samples_is_a_config_error() {
        assert!(matches!(build_dataset(&ChannelParams::default(), 0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn file_round_trip_preserves_shape_and_direction() {
        let ds = build_dataset(&ChannelParams::default(), 4, 9).unwrap();
        let back = Dataset::from_bytes(&ds.to_bytes(), 9, 0.8).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in ds.samples().iter().zip(back.samples()) {
            assert!(b.is_unit_norm(1e-12));
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((x - y).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = build_dataset(&ChannelParams::default(), 2, 9).unwrap().to_bytes();
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 3], 0, 0.8).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bad, 0, 0.8), Err(Error::Format(_))));
    }
}
