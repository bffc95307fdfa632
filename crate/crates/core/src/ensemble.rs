//! Multi-model ensemble: the transmitter runs every encoder/decoder pair,
//! keeps the one with the best local SGCS and prefixes its payload with the
//! member index.

use std::path::PathBuf;

use crate::channelgen::CsiSample;
use crate::error::{config, Error, Result};
use crate::kv::{KvMap, KvWriter};
use crate::metrics::{per_sample_sgcs, sample_sgcs};
use crate::model::Model;
use crate::quantizer::Bitstream;

/// `ceil(log2 v)`; zero for a single member.
pub fn index_bits_for(members: usize) -> usize {
    if members <= 1 {
        0
    } else {
        (usize::BITS - (members - 1).leading_zeros()) as usize
    }
}

#[derive(Clone, Debug)]
pub struct Ensemble {
    members: Vec<Model>,
    bits_total: usize,
}

/// Encoded sample plus the data behind the selection.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleCode {
    pub stream: Bitstream,
    pub selected: usize,
    /// Local SGCS of each member on this sample.
    pub member_sgcs: Vec<f64>,
}

impl Ensemble {
    pub fn new(members: Vec<Model>, bits_total: usize) -> Result<Self> {
        if members.is_empty() {
            return Err(config("an ensemble needs at least one member"));
        }
        let index_bits = index_bits_for(members.len());
        let payload = bits_total
            .checked_sub(index_bits)
            .ok_or_else(|| config(format!("{bits_total} bits cannot hold a {index_bits}-bit index")))?;
        let first = members[0].cfg;
        for (j, m) in members.iter().enumerate() {
            let b = m.cfg.bits_per_symbol as usize;
            if m.cfg.bits_total != payload || payload < b || payload % b != 0 {
                return Err(config(format!(
                    "member {j} emits {} bits, the ensemble payload is {payload} bits",
                    m.cfg.bits_total
                )));
            }
            if (m.cfg.n_tx, m.cfg.n_subband) != (first.n_tx, first.n_subband) {
                return Err(config(format!("member {j} expects a different sample shape")));
            }
        }
        Ok(Self { members, bits_total })
    }

    pub fn members(&self) -> &[Model] {
        &self.members
    }

    pub fn bits_total(&self) -> usize {
        self.bits_total
    }

    pub fn index_bits(&self) -> usize {
        index_bits_for(self.members.len())
    }

    pub fn payload_bits(&self) -> usize {
        self.bits_total - self.index_bits()
    }

    /// Selects, per sample, the member with the highest local SGCS (lowest
    /// index on ties) and emits `index || payload`.
    pub fn encode_batch<S: AsRef<CsiSample>>(&self, samples: &[S]) -> Result<Vec<EnsembleCode>> {
        let mut streams = Vec::with_capacity(self.members.len());
        let mut scores = Vec::with_capacity(self.members.len());
        for m in &self.members {
            let s = m.encode_batch(samples)?;
            let rec = m.decode_batch(&s)?;
            scores.push(per_sample_sgcs(samples, &rec)?);
            streams.push(s);
        }
        let width = self.index_bits();
        Ok((0..samples.len())
            .map(|i| {
                let member_sgcs: Vec<f64> = scores.iter().map(|s| s[i]).collect();
                let mut selected = 0;
                for (j, &v) in member_sgcs.iter().enumerate() {
                    if v > member_sgcs[selected] {
                        selected = j;
                    }
                }
                let stream = Bitstream::from_uint(selected as u64, width).concat(&streams[selected][i]);
                EnsembleCode { stream, selected, member_sgcs }
            })
            .collect())
    }

    pub fn encode(&self, sample: &CsiSample) -> Result<Bitstream> {
        Ok(self.encode_batch(std::slice::from_ref(sample))?.remove(0).stream)
    }

    /// Routes every stream to the member named by its prefix.
    pub fn decode_batch(&self, streams: &[Bitstream]) -> Result<Vec<CsiSample>> {
        let mut routed: Vec<Vec<(usize, Bitstream)>> = vec![Vec::new(); self.members.len()];
        for (i, s) in streams.iter().enumerate() {
            if s.len() != self.bits_total {
                return Err(Error::Protocol(format!(
                    "stream {i} has {} bits, expected {}",
                    s.len(),
                    self.bits_total
                )));
            }
            let (prefix, payload) = s.split_at(self.index_bits());
            let j = prefix.to_uint() as usize;
            if j >= self.members.len() {
                return Err(Error::Protocol(format!(
                    "stream {i} selects member {j} of {}",
                    self.members.len()
                )));
            }
            routed[j].push((i, payload));
        }
        let mut out: Vec<Option<CsiSample>> = vec![None; streams.len()];
        for (j, items) in routed.into_iter().enumerate() {
            if items.is_empty() {
                continue;
            }
            let payloads: Vec<Bitstream> = items.iter().map(|(_, p)| p.clone()).collect();
            for ((i, _), rec) in items.iter().zip(self.members[j].decode_batch(&payloads)?) {
                out[*i] = Some(rec);
            }
        }
        Ok(out.into_iter().map(|s| s.expect("every stream routed")).collect())
    }

    pub fn decode(&self, stream: &Bitstream) -> Result<CsiSample> {
        Ok(self.decode_batch(std::slice::from_ref(stream))?.remove(0))
    }

    /// Encodes and decodes `samples`, checking that the ensemble never loses
    /// to any member on any sample.
    pub fn evaluate<S: AsRef<CsiSample>>(&self, samples: &[S]) -> Result<EnsembleEval> {
        let codes = self.encode_batch(samples)?;
        let streams: Vec<Bitstream> = codes.iter().map(|c| c.stream.clone()).collect();
        let rec = self.decode_batch(&streams)?;
        let mut per_sample = Vec::with_capacity(samples.len());
        for (i, (s, r)) in samples.iter().zip(&rec).enumerate() {
            let v = sample_sgcs(s.as_ref(), r)?;
            let best = codes[i].member_sgcs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if v < best {
                return Err(Error::Protocol(format!("sample {i}: ensemble sgcs {v} below member best {best}")));
            }
            per_sample.push(v);
        }
        let n = samples.len().max(1) as f64;
        let member_means = (0..self.members.len())
            .map(|j| codes.iter().map(|c| c.member_sgcs[j]).sum::<f64>() / n)
            .collect();
        Ok(EnsembleEval {
            sgcs: per_sample.iter().sum::<f64>() / n,
            per_sample,
            member_sgcs: member_means,
            selected: codes.iter().map(|c| c.selected).collect(),
            reconstructions: rec,
        })
    }
}

#[derive(Clone, Debug)]
pub struct EnsembleEval {
    pub sgcs: f64,
    pub per_sample: Vec<f64>,
    /// Mean SGCS of each member alone.
    pub member_sgcs: Vec<f64>,
    pub selected: Vec<usize>,
    pub reconstructions: Vec<CsiSample>,
}

/// Plain-text ensemble description: `bits_total = M` and a comma-separated
/// `members` list of weight archive paths.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleManifest {
    pub bits_total: usize,
    pub members: Vec<PathBuf>,
}

impl EnsembleManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KvMap::parse(text)?;
        let bits_total = kv.req("bits_total")?;
        let list: String = kv.req("members")?;
        kv.deny_unknown()?;
        let members: Vec<PathBuf> =
            list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect();
        if members.is_empty() {
            return Err(config("ensemble manifest lists no members"));
        }
        Ok(Self { bits_total, members })
    }

    pub fn to_text(&self) -> String {
        let list: Vec<String> = self.members.iter().map(|p| p.display().to_string()).collect();
        let mut w = KvWriter::default();
        w.put("bits_total", self.bits_total).put("members", list.join(", "));
        w.finish()
    }
}
