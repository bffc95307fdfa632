use std::collections::HashMap;

use super::{ModelConfig, ModelWeights};
use crate::channelgen::CsiSample;
use crate::error::{contract, Result};
use crate::ndiff::{Graph, Tensor, Var, LAYER_NORM_EPS};
use crate::quantizer::{self, Bitstream};

/// Samples per inference chunk.
const INFERENCE_CHUNK: usize = 256;

/// Graph handles of every parameter, addressable by name.
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    /// Registers the weights as trainable leaves.
    pub fn params(g: &mut Graph, weights: &ModelWeights) -> Self {
        Self::bind(g, weights, true)
    }

    /// Registers the weights as constants (inference).
    pub fn constants(g: &mut Graph, weights: &ModelWeights) -> Self {
        Self::bind(g, weights, false)
    }

    fn bind(g: &mut Graph, weights: &ModelWeights, trainable: bool) -> Self {
        let mut vars = Vec::with_capacity(weights.len());
        let mut index = HashMap::with_capacity(weights.len());
        for (i, (name, t)) in weights.entries().iter().enumerate() {
            vars.push(if trainable { g.param(t.clone()) } else { g.constant(t.clone()) });
            index.insert(name.clone(), i);
        }
        Self { vars, index }
    }

    /// Wraps handles already on a graph, one per weight in weight order.
    pub fn from_vars(weights: &ModelWeights, vars: &[Var]) -> Result<Self> {
        if vars.len() != weights.len() {
            return Err(contract(format!("{} handles for {} weights", vars.len(), weights.len())));
        }
        let index = weights.entries().iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        Ok(Self { vars: vars.to_vec(), index })
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| contract(format!("missing parameter `{name}`")))
    }

    /// Handles in weight order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Attention projection handles (`x W + b`, weights stored `in x out`).
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl AttentionVars {
    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        let v = |m: &str| bound.var(&format!("{prefix}.attn.{m}"));
        Ok(Self {
            wq: v("wq")?,
            bq: v("bq")?,
            wk: v("wk")?,
            bk: v("bk")?,
            wv: v("wv")?,
            bv: v("bv")?,
            wo: v("wo")?,
            bo: v("bo")?,
        })
    }
}

/// Multi-head self-attention over sequences of `seq` rows stacked in `x`.
pub fn multi_head_attention(g: &mut Graph, x: Var, w: &AttentionVars, n_head: usize, seq: usize) -> Result<Var> {
    let q = g.linear(x, w.wq, w.bq)?;
    let k = g.linear(x, w.wk, w.bk)?;
    let v = g.linear(x, w.wv, w.bv)?;
    let heads = g.attention(q, k, v, seq, n_head)?;
    g.linear(heads, w.wo, w.bo)
}

/// Post-norm Transformer block:
/// `y = LN(x + MHA(x))`, `out = LN(y + W2 GELU(W1 y))`.
pub fn basic_block(g: &mut Graph, bound: &Bound, prefix: &str, x: Var, cfg: &ModelConfig) -> Result<Var> {
    let width = g.shape(x).get(1).copied();
    if width != Some(cfg.n_e) || g.shape(x)[0] % cfg.n_subband != 0 {
        return Err(contract(format!(
            "block input {:?} is not a stack of {}x{} sequences",
            g.shape(x),
            cfg.n_subband,
            cfg.n_e
        )));
    }
    let p = |s: &str| bound.var(&format!("{prefix}.{s}"));
    let attn = multi_head_attention(g, x, &AttentionVars::bind(bound, prefix)?, cfg.n_head, cfg.n_subband)?;
    let res1 = g.add(x, attn)?;
    let y = g.layer_norm(res1, p("ln1.gain")?, p("ln1.bias")?, LAYER_NORM_EPS)?;
    let h = g.linear(y, p("ffn.w1")?, p("ffn.b1")?)?;
    let h = g.gelu(h)?;
    let f = g.linear(h, p("ffn.w2")?, p("ffn.b2")?)?;
    let res2 = g.add(y, f)?;
    g.layer_norm(res2, p("ln2.gain")?, p("ln2.bias")?, LAYER_NORM_EPS)
}

/// What sits between the encoder squash and the decoder input.
#[derive(Clone, Debug)]
pub enum Bottleneck {
    /// Uniform quantizer with straight-through gradient.
    Quantize,
    /// Pass-through.
    Identity,
    /// `v + offset`, a constant shift (the quantizer with its residual frozen).
    Shift(Vec<f64>),
}

/// Graph handles produced by one batched forward pass.
pub struct BatchOutputs {
    /// Encoder output after the logistic squash, `batch x M/B`.
    pub squashed: Var,
    /// Decoder input, `batch x M/B`.
    pub dequantized: Var,
    /// Unit-norm reconstruction, `(batch * N_sb) x 2N_t`.
    pub reconstruction: Var,
    pub out_of_range: usize,
}

fn add_positions(g: &mut Graph, x: Var, pos: Var, batch: usize) -> Result<Var> {
    let tiled = if batch == 1 { pos } else { g.concat(&vec![pos; batch], 0)? };
    g.add(x, tiled)
}

/// Encoder up to the logistic squash. `input` is `(batch * N_sb) x 2N_t`.
pub fn encoder_forward(g: &mut Graph, bound: &Bound, cfg: &ModelConfig, input: Var) -> Result<Var> {
    let rows = g.shape(input)[0];
    let batch = rows / cfg.n_subband;
    let x = g.linear(input, bound.var("enc.embed.w")?, bound.var("enc.embed.b")?)?;
    let mut x = add_positions(g, x, bound.var("enc.pos")?, batch)?;
    for i in 0..cfg.n_b {
        x = basic_block(g, bound, &format!("enc.block{i}"), x, cfg)?;
    }
    let flat = g.reshape(x, vec![batch, cfg.n_subband * cfg.n_e])?;
    let logits = g.linear(flat, bound.var("enc.head.w")?, bound.var("enc.head.b")?)?;
    g.sigmoid(logits)
}

/// Decoder from the dequantized `batch x M/B` vector to unit-norm subband rows.
pub fn decoder_forward(g: &mut Graph, bound: &Bound, cfg: &ModelConfig, z: Var) -> Result<Var> {
    let batch = g.shape(z)[0];
    let h = g.linear(z, bound.var("dec.input.w")?, bound.var("dec.input.b")?)?;
    let h = g.gelu(h)?;
    let x = g.reshape(h, vec![batch * cfg.n_subband, cfg.n_e])?;
    let mut x = add_positions(g, x, bound.var("dec.pos")?, batch)?;
    for i in 0..cfg.n_b {
        x = basic_block(g, bound, &format!("dec.block{i}"), x, cfg)?;
    }
    let out = g.linear(x, bound.var("dec.out.w")?, bound.var("dec.out.b")?)?;
    g.row_normalize(out)
}

/// Full encoder, bottleneck and decoder on a batch.
pub fn forward(g: &mut Graph, bound: &Bound, cfg: &ModelConfig, input: Var, bottleneck: &Bottleneck) -> Result<BatchOutputs> {
    let squashed = encoder_forward(g, bound, cfg, input)?;
    let (dequantized, out_of_range) = match bottleneck {
        Bottleneck::Quantize => quantizer::quantize_ste(g, squashed, cfg.bits_per_symbol)?,
        Bottleneck::Identity => (squashed, 0),
        Bottleneck::Shift(offset) => {
            let c = g.constant(Tensor::new(g.shape(squashed).to_vec(), offset.clone())?);
            (g.add(squashed, c)?, 0)
        }
    };
    let reconstruction = decoder_forward(g, bound, cfg, dequantized)?;
    Ok(BatchOutputs { squashed, dequantized, reconstruction, out_of_range })
}

/// Stacks samples into the `(batch * N_sb) x 2N_t` encoder input.
pub fn input_tensor<S: AsRef<CsiSample>>(samples: &[S], cfg: &ModelConfig) -> Result<Tensor> {
    let mut data = Vec::with_capacity(samples.len() * cfg.n_subband * 2 * cfg.n_tx);
    for (i, s) in samples.iter().enumerate() {
        let s = s.as_ref();
        if s.n_tx() != cfg.n_tx || s.n_subband() != cfg.n_subband {
            return Err(contract(format!(
                "sample {i} is {}x{}, model expects {}x{}",
                s.n_tx(),
                s.n_subband(),
                cfg.n_tx,
                cfg.n_subband
            )));
        }
        data.extend(s.to_real_rows());
    }
    Tensor::matrix(samples.len() * cfg.n_subband, 2 * cfg.n_tx, data)
}

fn rows_to_samples(t: &Tensor, cfg: &ModelConfig) -> Result<Vec<CsiSample>> {
    t.data()
        .chunks_exact(cfg.n_subband * 2 * cfg.n_tx)
        .map(|chunk| CsiSample::from_real_rows(cfg.n_tx, cfg.n_subband, chunk))
        .collect()
}

/// A configuration together with matching weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub weights: ModelWeights,
}

impl Model {
    pub fn new(cfg: ModelConfig, weights: ModelWeights) -> Result<Self> {
        cfg.validate()?;
        weights.check_layout(&cfg)?;
        Ok(Self { cfg, weights })
    }

    /// Quantizer indices for each sample.
    pub fn encode_indices<S: AsRef<CsiSample>>(&self, samples: &[S]) -> Result<Vec<Vec<u8>>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(INFERENCE_CHUNK) {
            let mut g = Graph::new();
            let bound = Bound::constants(&mut g, &self.weights);
            let input = g.constant(input_tensor(chunk, &self.cfg)?);
            let squashed = encoder_forward(&mut g, &bound, &self.cfg, input)?;
            let q = quantizer::quantize_uniform(g.value(squashed).data(), self.cfg.bits_per_symbol)?;
            out.extend(q.indices.chunks_exact(self.cfg.symbols()).map(<[u8]>::to_vec));
        }
        Ok(out)
    }

    pub fn encode_batch<S: AsRef<CsiSample>>(&self, samples: &[S]) -> Result<Vec<Bitstream>> {
        self.encode_indices(samples)?
            .iter()
            .map(|idx| quantizer::pack_bits(idx, self.cfg.bits_per_symbol))
            .collect()
    }

    pub fn decode_batch(&self, streams: &[Bitstream]) -> Result<Vec<CsiSample>> {
        let mut values = Vec::with_capacity(streams.len() * self.cfg.symbols());
        for (i, s) in streams.iter().enumerate() {
            if s.len() != self.cfg.bits_total {
                return Err(contract(format!(
                    "stream {i} has {} bits, model expects {}",
                    s.len(),
                    self.cfg.bits_total
                )));
            }
            let idx = quantizer::unpack_bits(s, self.cfg.bits_per_symbol)?;
            values.extend(quantizer::dequantize_uniform(&idx, self.cfg.bits_per_symbol)?);
        }
        self.decode_values(&values, streams.len())
    }

    fn decode_values(&self, values: &[f64], n: usize) -> Result<Vec<CsiSample>> {
        let sym = self.cfg.symbols();
        let mut out = Vec::with_capacity(n);
        for chunk in values.chunks(INFERENCE_CHUNK * sym) {
            let mut g = Graph::new();
            let bound = Bound::constants(&mut g, &self.weights);
            let z = g.constant(Tensor::matrix(chunk.len() / sym, sym, chunk.to_vec())?);
            let rec = decoder_forward(&mut g, &bound, &self.cfg, z)?;
            out.extend(rows_to_samples(g.value(rec), &self.cfg)?);
        }
        Ok(out)
    }

    /// `decode(encode(w))` for every sample, skipping the bit packing.
    pub fn reconstruct<S: AsRef<CsiSample>>(&self, samples: &[S]) -> Result<Vec<CsiSample>> {
        let indices = self.encode_indices(samples)?;
        let flat: Vec<u8> = indices.concat();
        let values = quantizer::dequantize_uniform(&flat, self.cfg.bits_per_symbol)?;
        self.decode_values(&values, samples.len())
    }
}
