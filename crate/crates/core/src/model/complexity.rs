//! Trainable-parameter and FLOP counts.
//!
//! FLOPs follow a simple convention: two per scalar multiply-accumulate,
//! with every weight matrix applied once per forward pass of one sample.
//! Biases, normalization, softmax and the attention score products are not
//! counted.

use super::{param_layout, ModelConfig, ParamKind};
use crate::error::Result;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ComponentCounts {
    pub embedding: u64,
    pub positions: u64,
    pub blocks: u64,
    /// Encoder head (flatten -> M/B) or decoder input (M/B -> N_e N_sb).
    pub bottleneck: u64,
    /// Decoder output head (zero for the encoder).
    pub output: u64,
}

impl ComponentCounts {
    pub fn total(&self) -> u64 {
        self.embedding + self.positions + self.blocks + self.bottleneck + self.output
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Complexity {
    pub encoder: ComponentCounts,
    pub decoder: ComponentCounts,
}

fn bucket<'a>(c: &'a mut Complexity, name: &str) -> &'a mut u64 {
    let side = if name.starts_with("enc.") { &mut c.encoder } else { &mut c.decoder };
    if name.contains(".block") {
        &mut side.blocks
    } else if name.ends_with(".pos") {
        &mut side.positions
    } else if name.starts_with("enc.embed") {
        &mut side.embedding
    } else if name.starts_with("dec.out") {
        &mut side.output
    } else {
        &mut side.bottleneck
    }
}

/// Trainable parameters per component, summed over the parameter layout.
pub fn count_params(cfg: &ModelConfig) -> Result<Complexity> {
    cfg.validate()?;
    let mut c = Complexity::default();
    for (name, shape, _) in param_layout(cfg) {
        *bucket(&mut c, &name) += shape.iter().product::<usize>() as u64;
    }
    Ok(c)
}

/// Forward-pass FLOPs per component for one sample.
pub fn count_flops(cfg: &ModelConfig) -> Result<Complexity> {
    cfg.validate()?;
    let mut c = Complexity::default();
    for (name, shape, kind) in param_layout(cfg) {
        if kind == ParamKind::Dense {
            *bucket(&mut c, &name) += 2 * shape.iter().product::<usize>() as u64;
        }
    }
    Ok(c)
}

/// Reference `(M, encoder, decoder)` parameter counts of the full-size
/// architecture ([`ModelConfig::paper`]).
pub const REFERENCE_PARAMS: [(usize, f64, f64); 3] =
    [(32, 2.1107e7, 2.1108e7), (48, 2.1113e7, 2.1114e7), (120, 2.1141e7, 2.1142e7)];
/// Allowed relative deviation from a reference count.
pub const REFERENCE_TOLERANCE: f64 = 0.02;
/// Allowed relative spread of counts across the reference payload widths.
pub const SPREAD_TOLERANCE: f64 = 0.005;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceRow {
    pub bits_total: usize,
    pub params: Complexity,
    pub flops: Complexity,
    pub encoder_deviation: f64,
    pub decoder_deviation: f64,
}

impl ReferenceRow {
    pub fn pass(&self) -> bool {
        self.encoder_deviation.abs() <= REFERENCE_TOLERANCE && self.decoder_deviation.abs() <= REFERENCE_TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceComparison {
    pub rows: Vec<ReferenceRow>,
    /// `(max - min) / min` of the encoder counts across rows.
    pub encoder_spread: f64,
    pub decoder_spread: f64,
}

impl ReferenceComparison {
    pub fn spread_pass(&self) -> bool {
        self.encoder_spread < SPREAD_TOLERANCE && self.decoder_spread < SPREAD_TOLERANCE
    }
}

fn spread(values: impl Iterator<Item = u64> + Clone) -> f64 {
    let max = values.clone().max().unwrap_or(0) as f64;
    let min = values.min().unwrap_or(0) as f64;
    if min == 0.0 {
        0.0
    } else {
        (max - min) / min
    }
}

/// Counts the full-size architecture at every reference payload width.
pub fn compare_with_reference() -> Result<ReferenceComparison> {
    let rows = REFERENCE_PARAMS
        .iter()
        .map(|&(m, enc, dec)| {
            let cfg = ModelConfig::paper(m);
            let params = count_params(&cfg)?;
            Ok(ReferenceRow {
                bits_total: m,
                params,
                flops: count_flops(&cfg)?,
                encoder_deviation: params.encoder.total() as f64 / enc - 1.0,
                decoder_deviation: params.decoder.total() as f64 / dec - 1.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let encoder_spread = spread(rows.iter().map(|r| r.params.encoder.total()));
    let decoder_spread = spread(rows.iter().map(|r| r.params.decoder.total()));
    Ok(ReferenceComparison { rows, encoder_spread, decoder_spread })
}
