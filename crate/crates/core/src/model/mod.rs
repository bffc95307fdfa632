//! Transformer encoder/decoder for eigenvector CSI.
//!
//! Encoder: per-subband embedding of `[Re; Im]` (2N_t -> N_e), learnable
//! positions, N_b basic blocks, flatten, dense to M/B, logistic squash,
//! uniform quantizer. Decoder: dequantize, dense to N_e * N_sb with GELU,
//! reshape, learnable positions, N_b basic blocks, per-subband dense
//! N_e -> 2N_t, per-subband unit normalization.

mod archive;
mod complexity;
mod net;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::channelgen::CsiSample;
use crate::error::{config, contract, Result};
use crate::kv::{KvMap, KvWriter};
use crate::ndiff::Tensor;
use crate::quantizer::Bitstream;
use crate::rng::{substream, Domain};

pub use archive::{read_weights, write_weights};
pub use complexity::{
    compare_with_reference, count_flops, count_params, ComponentCounts, Complexity, ReferenceComparison, ReferenceRow,
    REFERENCE_PARAMS, REFERENCE_TOLERANCE, SPREAD_TOLERANCE,
};
pub use net::{
    basic_block, decoder_forward, encoder_forward, forward, input_tensor, multi_head_attention, AttentionVars,
    BatchOutputs, Bottleneck, Bound, Model,
};

/// Standard deviation of the positional-vector initializer.
pub const POS_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_e: usize,
    pub n_b: usize,
    pub n_head: usize,
    pub k_h: usize,
    pub bits_total: usize,
    pub bits_per_symbol: u32,
    pub n_tx: usize,
    pub n_subband: usize,
}

impl ModelConfig {
    /// Full-size architecture (N_e = 512, 10 blocks, 16 heads, k_h = 2, 32 Tx, 12 subbands, B = 2).
    pub fn paper(bits_total: usize) -> Self {
        Self { n_e: 512, n_b: 10, n_head: 16, k_h: 2, bits_total, bits_per_symbol: 2, n_tx: 32, n_subband: 12 }
    }

    /// Small architecture used for single-core experiments.
    pub fn desk(bits_total: usize) -> Self {
        Self { n_e: 64, n_b: 2, n_head: 4, k_h: 2, bits_total, bits_per_symbol: 2, n_tx: 8, n_subband: 12 }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_e", self.n_e),
            ("n_b", self.n_b),
            ("n_head", self.n_head),
            ("k_h", self.k_h),
            ("bits_total", self.bits_total),
            ("n_tx", self.n_tx),
            ("n_subband", self.n_subband),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(config(format!("{name} must be positive")));
            }
        }
        if !(1..=crate::quantizer::MAX_BITS).contains(&self.bits_per_symbol) {
            return Err(config("bits_per_symbol must be in 1..=8"));
        }
        if self.n_e % self.n_head != 0 {
            return Err(config(format!("n_e = {} is not divisible by n_head = {}", self.n_e, self.n_head)));
        }
        if self.bits_total % self.bits_per_symbol as usize != 0 {
            return Err(config(format!(
                "bits_total = {} is not divisible by bits_per_symbol = {}",
                self.bits_total, self.bits_per_symbol
            )));
        }
        Ok(())
    }

    /// Width of the bottleneck, `M / B`.
    pub fn symbols(&self) -> usize {
        self.bits_total / self.bits_per_symbol as usize
    }

    pub fn with_bits(self, bits_total: usize) -> Self {
        Self { bits_total, ..self }
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.put("n_e", self.n_e)
            .put("n_b", self.n_b)
            .put("n_head", self.n_head)
            .put("k_h", self.k_h)
            .put("bits_total", self.bits_total)
            .put("bits_per_symbol", self.bits_per_symbol)
            .put("n_tx", self.n_tx)
            .put("n_subband", self.n_subband);
    }

    /// Reads every field, falling back to `base` for absent keys.
    pub fn read_kv(kv: &KvMap, base: ModelConfig) -> Result<Self> {
        let cfg = Self {
            n_e: kv.get_or("n_e", base.n_e)?,
            n_b: kv.get_or("n_b", base.n_b)?,
            n_head: kv.get_or("n_head", base.n_head)?,
            k_h: kv.get_or("k_h", base.k_h)?,
            bits_total: kv.get_or("bits_total", base.bits_total)?,
            bits_per_symbol: kv.get_or("bits_per_symbol", base.bits_per_symbol)?,
            n_tx: kv.get_or("n_tx", base.n_tx)?,
            n_subband: kv.get_or("n_subband", base.n_subband)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_sidecar(&self) -> String {
        let mut w = KvWriter::default();
        self.write_kv(&mut w);
        w.finish()
    }

    /// Parses a sidecar; every field is required and no other key is allowed.
    pub fn from_sidecar(text: &str) -> Result<Self> {
        let kv = KvMap::parse(text)?;
        let cfg = Self {
            n_e: kv.req("n_e")?,
            n_b: kv.req("n_b")?,
            n_head: kv.req("n_head")?,
            k_h: kv.req("k_h")?,
            bits_total: kv.req("bits_total")?,
            bits_per_symbol: kv.req("bits_per_symbol")?,
            n_tx: kv.req("n_tx")?,
            n_subband: kv.req("n_subband")?,
        };
        kv.deny_unknown()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Dense,
    Bias,
    Position,
    NormGain,
    NormBias,
}

/// Whether a parameter belongs to the bottleneck-adjacent layers that are
/// rebuilt when the payload width changes.
pub fn is_head_param(name: &str) -> bool {
    name.starts_with("enc.head.") || name.starts_with("dec.input.")
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    entries: Vec<(String, Tensor)>,
}

/// Name, shape and init kind of every parameter of `cfg`, in canonical order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, ParamKind)> {
    use ParamKind::*;
    let (e, nt2, nsb, hid, sym) = (cfg.n_e, 2 * cfg.n_tx, cfg.n_subband, cfg.k_h * cfg.n_e, cfg.symbols());
    let mut out: Vec<(String, Vec<usize>, ParamKind)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, kind| out.push((name, shape, kind));
    let blocks = |push: &mut dyn FnMut(String, Vec<usize>, ParamKind), side: &str| {
        for i in 0..cfg.n_b {
            let p = format!("{side}.block{i}");
            for m in ["q", "k", "v", "o"] {
                push(format!("{p}.attn.w{m}"), vec![e, e], Dense);
                push(format!("{p}.attn.b{m}"), vec![e], Bias);
            }
            push(format!("{p}.ln1.gain"), vec![e], NormGain);
            push(format!("{p}.ln1.bias"), vec![e], NormBias);
            push(format!("{p}.ffn.w1"), vec![e, hid], Dense);
            push(format!("{p}.ffn.b1"), vec![hid], Bias);
            push(format!("{p}.ffn.w2"), vec![hid, e], Dense);
            push(format!("{p}.ffn.b2"), vec![e], Bias);
            push(format!("{p}.ln2.gain"), vec![e], NormGain);
            push(format!("{p}.ln2.bias"), vec![e], NormBias);
        }
    };
    push("enc.embed.w".into(), vec![nt2, e], Dense);
    push("enc.embed.b".into(), vec![e], Bias);
    push("enc.pos".into(), vec![nsb, e], Position);
    blocks(&mut push, "enc");
    push("enc.head.w".into(), vec![nsb * e, sym], Dense);
    push("enc.head.b".into(), vec![sym], Bias);
    push("dec.input.w".into(), vec![sym, nsb * e], Dense);
    push("dec.input.b".into(), vec![nsb * e], Bias);
    push("dec.pos".into(), vec![nsb, e], Position);
    blocks(&mut push, "dec");
    push("dec.out.w".into(), vec![e, nt2], Dense);
    push("dec.out.b".into(), vec![nt2], Bias);
    out
}

fn init_tensor(shape: &[usize], kind: ParamKind, rng: &mut crate::rng::Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = match kind {
        ParamKind::Dense => {
            let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-limit..limit)).collect()
        }
        ParamKind::Position => {
            let normal = Normal::new(0.0, POS_INIT_STD).expect("valid std");
            (0..n).map(|_| normal.sample(rng)).collect()
        }
        ParamKind::NormGain => vec![1.0; n],
        ParamKind::Bias | ParamKind::NormBias => vec![0.0; n],
    };
    Tensor::new(shape.to_vec(), data).expect("layout shapes are consistent")
}

/// Xavier-uniform dense weights, zero biases, N(0, 0.02^2) positions, unit
/// norm gains. Parameter `i` draws from its own substream of `seed`.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    cfg.validate()?;
    let entries = param_layout(cfg)
        .into_iter()
        .enumerate()
        .map(|(i, (name, shape, kind))| {
            let mut rng = substream(seed, Domain::Init, i as u64);
            (name, init_tensor(&shape, kind, &mut rng))
        })
        .collect();
    Ok(ModelWeights { entries })
}

impl ModelWeights {
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for (name, t) in &entries {
            if !seen.insert(name.as_str()) {
                return Err(contract(format!("duplicate parameter `{name}`")));
            }
            if !t.is_finite() {
                return Err(crate::Error::Numeric(format!("parameter `{name}`")));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Checks names and shapes against the layout of `cfg`.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let layout = param_layout(cfg);
        if layout.len() != self.entries.len() {
            return Err(contract(format!(
                "weights hold {} tensors, config expects {}",
                self.entries.len(),
                layout.len()
            )));
        }
        for ((name, shape, _), (n, t)) in layout.iter().zip(&self.entries) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(contract(format!(
                    "parameter `{n}` {:?} does not match expected `{name}` {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Replaces the bottleneck-adjacent layers with freshly initialized ones
    /// sized for `new_cfg`; every other tensor is kept as is.
    pub fn resize_head(&self, new_cfg: &ModelConfig, seed: u64) -> Result<ModelWeights> {
        new_cfg.validate()?;
        let layout = param_layout(new_cfg);
        if layout.len() != self.entries.len() {
            return Err(contract("head surgery needs an otherwise identical architecture"));
        }
        let mut entries = Vec::with_capacity(layout.len());
        for (i, ((name, shape, kind), (old_name, old))) in layout.into_iter().zip(&self.entries).enumerate() {
            if &name != old_name {
                return Err(contract(format!("layout mismatch at `{old_name}`")));
            }
            if is_head_param(&name) {
                let mut rng = substream(seed, Domain::Surgery, i as u64);
                entries.push((name, init_tensor(&shape, kind, &mut rng)));
            } else {
                if old.shape() != shape.as_slice() {
                    return Err(contract(format!("`{name}` changed shape outside the head")));
                }
                entries.push((name, old.clone()));
            }
        }
        Ok(ModelWeights { entries })
    }
}

impl Model {
    pub fn encode(&self, sample: &CsiSample) -> Result<Bitstream> {
        Ok(self.encode_batch(std::slice::from_ref(sample))?.pop().expect("one sample in, one out"))
    }

    pub fn decode(&self, stream: &Bitstream) -> Result<CsiSample> {
        Ok(self.decode_batch(std::slice::from_ref(stream))?.pop().expect("one stream in, one out"))
    }
}
