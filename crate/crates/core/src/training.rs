//! Losses, learning-rate schedule, the training loop and staged training.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::augment::{augment_sample, AugmentConfig};
use crate::channelgen::{CsiSample, Dataset};
use crate::error::{config, contract, Error, Result};
use crate::kv::{KvMap, KvWriter};
use crate::metrics::{self, sgcs};
use crate::model::{forward, init_model, input_tensor, Bottleneck, Bound, Model, ModelConfig};
use crate::ndiff::{AdamConfig, AdamState, Graph, Tensor, Var};
use crate::rng::{mix, substream, Domain};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Cosine,
    Scoring,
    Mse,
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "scoring" => Ok(Self::Scoring),
            "mse" => Ok(Self::Mse),
            _ => Err(config(format!("unknown loss kind `{s}`"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cosine => "cosine",
            Self::Scoring => "scoring",
            Self::Mse => "mse",
        })
    }
}

/// Base distance of the quantization-compensation term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantBase {
    Mse,
    Nmse,
}

impl FromStr for QuantBase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Self::Mse),
            "nmse" => Ok(Self::Nmse),
            _ => Err(config(format!("unknown quantization loss base `{s}`"))),
        }
    }
}

impl fmt::Display for QuantBase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mse => "mse",
            Self::Nmse => "nmse",
        })
    }
}

/// One stage of staged training. Written in config files as
/// `bits:epochs[:loss_kind[:quant_comp_weight]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageConfig {
    pub bits_total: usize,
    pub epochs: usize,
    pub loss_kind: LossKind,
    pub quant_comp_weight: f64,
}

impl StageConfig {
    fn parse(text: &str, base: &TrainConfig) -> Result<Self> {
        let parts: Vec<&str> = text.split(':').map(str::trim).collect();
        if !(2..=4).contains(&parts.len()) {
            return Err(config(format!("stage `{text}`: expected bits:epochs[:loss[:weight]]")));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| config(format!("stage `{text}`: bad number `{s}`")));
        Ok(Self {
            bits_total: num(parts[0])?,
            epochs: num(parts[1])?,
            loss_kind: parts.get(2).map_or(Ok(base.loss_kind), |s| s.parse())?,
            quant_comp_weight: match parts.get(3) {
                Some(s) => s.parse().map_err(|_| config(format!("stage `{text}`: bad weight `{s}`")))?,
                None => base.quant_comp_weight,
            },
        })
    }
}

impl fmt::Display for StageConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}:{}", self.bits_total, self.epochs, self.loss_kind, self.quant_comp_weight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: usize,
    pub loss_kind: LossKind,
    pub quant_comp_weight: f64,
    pub quant_comp_base: QuantBase,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub stages: Vec<StageConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 64,
            lr_max: 1e-3,
            lr_min: 1e-5,
            warmup_epochs: 10,
            decay_epochs: 290,
            loss_kind: LossKind::Cosine,
            quant_comp_weight: 0.0,
            quant_comp_base: QuantBase::Mse,
            seed: 0,
            augment: AugmentConfig::disabled(),
            stages: Vec::new(),
        }
    }
}

impl TrainConfig {
    /// Warm-up then cosine decay over exactly `epochs` epochs.
    pub fn with_epochs(mut self, epochs: usize, warmup: usize) -> Self {
        self.epochs = epochs;
        self.warmup_epochs = warmup.min(epochs);
        self.decay_epochs = epochs - self.warmup_epochs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config("epochs and batch_size must be positive"));
        }
        if self.warmup_epochs > self.epochs {
            return Err(config("warmup_epochs exceeds epochs"));
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(config("learning rates must satisfy 0 < lr_min <= lr_max"));
        }
        if !(self.quant_comp_weight >= 0.0 && self.quant_comp_weight.is_finite()) {
            return Err(config("quant_comp_weight must be a finite nonnegative number"));
        }
        for s in &self.stages {
            if s.epochs == 0 || !(s.quant_comp_weight >= 0.0) {
                return Err(config(format!("invalid stage {s}")));
            }
        }
        for pair in self.stages.windows(2) {
            if pair[1].bits_total > pair[0].bits_total {
                return Err(config(format!(
                    "stages must not increase the payload ({} -> {} bits)",
                    pair[0].bits_total, pair[1].bits_total
                )));
            }
        }
        self.augment.validate()
    }

    /// Schedule used for one stage: the run's warm-up, then cosine decay over
    /// the rest of the stage.
    pub fn for_stage(&self, stage: &StageConfig) -> Self {
        let mut cfg = self.clone().with_epochs(stage.epochs, self.warmup_epochs);
        cfg.loss_kind = stage.loss_kind;
        cfg.quant_comp_weight = stage.quant_comp_weight;
        cfg.stages.clear();
        cfg
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.put("epochs", self.epochs)
            .put("batch_size", self.batch_size)
            .put("lr_max", self.lr_max)
            .put("lr_min", self.lr_min)
            .put("warmup_epochs", self.warmup_epochs)
            .put("decay_epochs", self.decay_epochs)
            .put("loss_kind", self.loss_kind)
            .put("quant_comp_weight", self.quant_comp_weight)
            .put("quant_comp_base", self.quant_comp_base)
            .put("seed", self.seed);
        if !self.stages.is_empty() {
            let list: Vec<String> = self.stages.iter().map(ToString::to_string).collect();
            w.put("stages", list.join(","));
        }
        self.augment.write_kv(w);
    }

    /// Reads training keys on top of `base`. `decay_epochs` defaults to the
    /// epochs left after warm-up.
    pub fn read_kv(kv: &KvMap, base: TrainConfig) -> Result<Self> {
        let epochs = kv.get_or("epochs", base.epochs)?;
        let warmup_epochs = kv.get_or("warmup_epochs", base.warmup_epochs.min(epochs))?;
        let mut cfg = Self {
            epochs,
            batch_size: kv.get_or("batch_size", base.batch_size)?,
            lr_max: kv.get_or("lr_max", base.lr_max)?,
            lr_min: kv.get_or("lr_min", base.lr_min)?,
            warmup_epochs,
            decay_epochs: kv.get_or("decay_epochs", epochs.saturating_sub(warmup_epochs))?,
            loss_kind: match kv.raw("loss_kind") {
                Some(s) => s.parse()?,
                None => base.loss_kind,
            },
            quant_comp_weight: kv.get_or("quant_comp_weight", base.quant_comp_weight)?,
            quant_comp_base: match kv.raw("quant_comp_base") {
                Some(s) => s.parse()?,
                None => base.quant_comp_base,
            },
            seed: kv.get_or("seed", base.seed)?,
            augment: AugmentConfig::read_kv(kv, base.augment)?,
            stages: Vec::new(),
        };
        if let Some(list) = kv.raw("stages") {
            cfg.stages = list
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| StageConfig::parse(s, &cfg))
                .collect::<Result<_>>()?;
        } else {
            cfg.stages = base.stages;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `alpha_t` for epoch `t` (1-based): linear warm-up to `lr_max`, then cosine
/// decay to `lr_min`, held at `lr_min` afterwards.
pub fn lr_at_epoch(t: usize, cfg: &TrainConfig) -> Result<f64> {
    if t == 0 || t > cfg.epochs {
        return Err(contract(format!("epoch {t} outside 1..={}", cfg.epochs)));
    }
    if t <= cfg.warmup_epochs {
        return Ok(t as f64 / cfg.warmup_epochs as f64 * cfg.lr_max);
    }
    let since = t - cfg.warmup_epochs;
    if cfg.decay_epochs == 0 {
        return Ok(cfg.lr_max);
    }
    if since >= cfg.decay_epochs {
        return Ok(cfg.lr_min);
    }
    let phase = since as f64 * PI / cfg.decay_epochs as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + phase.cos()))
}

/// `1 - mean_k |w_k^H w'_k| / (||w_k|| ||w'_k||)` over the rows of a batch.
pub fn loss_cosine(g: &mut Graph, pred: Var, truth: Var) -> Result<Var> {
    let cos = g.row_cosine(pred, truth, false)?;
    let m = g.mean(cos)?;
    let neg = g.scale(m, -1.0)?;
    g.add_scalar(neg, 1.0)
}

/// Negative SGCS of the batch.
pub fn loss_scoring(g: &mut Graph, pred: Var, truth: Var) -> Result<Var> {
    let cos = g.row_cosine(pred, truth, true)?;
    let m = g.mean(cos)?;
    g.scale(m, -1.0)
}

pub fn loss_mse(g: &mut Graph, pred: Var, truth: Var) -> Result<Var> {
    let d = g.sub(pred, truth)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

/// Distance between the quantizer input and its (detached) dequantized output.
pub fn loss_quant_comp(g: &mut Graph, v_pre: Var, v_post: &Tensor, base: QuantBase) -> Result<Var> {
    if g.shape(v_pre) != v_post.shape() {
        return Err(contract(format!(
            "quantizer input {:?} and output {:?} differ in shape",
            g.shape(v_pre),
            v_post.shape()
        )));
    }
    let c = g.constant(v_post.clone());
    let err = loss_mse(g, v_pre, c)?;
    match base {
        QuantBase::Mse => Ok(err),
        QuantBase::Nmse => {
            let sq = g.mul(v_pre, v_pre)?;
            let power = g.mean(sq)?;
            g.div(err, power)
        }
    }
}

/// Plain-value form of [`loss_quant_comp`].
pub fn quant_comp_value(v_pre: &[f64], v_post: &[f64], base: QuantBase) -> Result<f64> {
    match base {
        QuantBase::Mse => metrics::mse(v_pre, v_post),
        QuantBase::Nmse => metrics::nmse(v_pre, v_post),
    }
}

/// Reconstruction loss on the graph.
pub fn loss_original(g: &mut Graph, kind: LossKind, pred: Var, truth: Var) -> Result<Var> {
    match kind {
        LossKind::Cosine => loss_cosine(g, pred, truth),
        LossKind::Scoring => loss_scoring(g, pred, truth),
        LossKind::Mse => loss_mse(g, pred, truth),
    }
}

/// Evaluates a reconstruction loss on sample lists.
pub fn sample_loss(kind: LossKind, truth: &[CsiSample], pred: &[CsiSample]) -> Result<f64> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(contract(format!("{} truth samples vs {} predictions", truth.len(), pred.len())));
    }
    let mut g = Graph::new();
    let t = g.constant(real_rows(truth)?);
    let p = g.constant(real_rows(pred)?);
    let l = loss_original(&mut g, kind, p, t)?;
    Ok(g.value(l).item())
}

fn real_rows(samples: &[CsiSample]) -> Result<Tensor> {
    let first = &samples[0];
    let (n_tx, n_sb) = (first.n_tx(), first.n_subband());
    let mut data = Vec::with_capacity(samples.len() * n_sb * 2 * n_tx);
    for s in samples {
        if s.n_tx() != n_tx || s.n_subband() != n_sb {
            return Err(contract("samples differ in shape"));
        }
        data.extend(s.to_real_rows());
    }
    Tensor::matrix(samples.len() * n_sb, 2 * n_tx, data)
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_sgcs: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,val_sgcs";

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for e in log {
        out.push_str(&format!("{},{:e},{:.17e},{:.17e}\n", e.epoch, e.lr, e.train_loss, e.val_sgcs));
    }
    out
}

/// SGCS of the model on the validation split (the training split when the
/// validation split is empty).
pub fn validation_sgcs(model: &Model, data: &Dataset) -> Result<f64> {
    let mut val = data.validation();
    if val.is_empty() {
        val = data.train();
    }
    let rec = model.reconstruct(&val)?;
    sgcs(&val, &rec)
}

/// Loss value and gradients of one batch.
pub struct BatchResult {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    pub out_of_range: usize,
}

/// Forward and backward pass on one batch with the quantizer in place.
pub fn batch_gradients(
    model: &Model,
    inputs: &[CsiSample],
    targets: &[CsiSample],
    cfg: &TrainConfig,
) -> Result<BatchResult> {
    let mut g = Graph::new();
    let bound = Bound::params(&mut g, &model.weights);
    let input = g.constant(input_tensor(inputs, &model.cfg)?);
    let target = g.constant(input_tensor(targets, &model.cfg)?);
    let out = forward(&mut g, &bound, &model.cfg, input, &Bottleneck::Quantize)?;
    let mut loss = loss_original(&mut g, cfg.loss_kind, out.reconstruction, target)?;
    if cfg.quant_comp_weight > 0.0 {
        let post = g.value(out.dequantized).clone();
        let q = loss_quant_comp(&mut g, out.squashed, &post, cfg.quant_comp_base)?;
        let q = g.scale(q, cfg.quant_comp_weight)?;
        loss = g.add(loss, q)?;
    }
    g.backward(loss)?;
    let grads = bound
        .vars()
        .iter()
        .zip(model.weights.tensors())
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    Ok(BatchResult { loss: g.value(loss).item(), grads, out_of_range: out.out_of_range })
}

/// A model with its optimizer state and accumulated log.
pub struct Trainer {
    pub model: Model,
    adam: AdamState,
    log: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(model: Model) -> Self {
        let adam = AdamState::new(model.weights.tensors(), AdamConfig::default());
        Self { model, adam, log: Vec::new() }
    }

    pub fn log(&self) -> &[EpochLog] {
        &self.log
    }

    pub fn epochs_done(&self) -> usize {
        self.log.len()
    }

    /// Runs `cfg.epochs` epochs on the training split. Epoch numbering, the
    /// shuffle stream and the augmentation stream continue across calls.
    pub fn run(&mut self, data: &Dataset, cfg: &TrainConfig) -> Result<()> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(config("training needs a nonempty dataset"));
        }
        if data.n_tx() != self.model.cfg.n_tx || data.n_subband() != self.model.cfg.n_subband {
            return Err(contract(format!(
                "dataset is {}x{}, model expects {}x{}",
                data.n_tx(),
                data.n_subband(),
                self.model.cfg.n_tx,
                self.model.cfg.n_subband
            )));
        }
        let (mut train_idx, _) = data.split();
        if train_idx.is_empty() {
            return Err(config("training split is empty"));
        }
        let samples = data.samples();
        for t in 1..=cfg.epochs {
            let epoch = self.log.len() + 1;
            let diverged = |e: Error| match e {
                Error::Numeric(reason) | Error::Degenerate(reason) => Error::Divergence { epoch, reason },
                other => other,
            };
            let lr = lr_at_epoch(t, cfg)?;
            train_idx.sort_unstable();
            train_idx.shuffle(&mut substream(cfg.seed, Domain::Shuffle, epoch as u64));
            let mut aug_rng = substream(cfg.seed, Domain::Augment, epoch as u64);
            let mut loss_sum = 0.0;
            for batch in train_idx.chunks(cfg.batch_size) {
                let (inputs, targets) = if cfg.augment.is_disabled() {
                    let s: Vec<CsiSample> = batch.iter().map(|&i| samples[i].clone()).collect();
                    (s.clone(), s)
                } else {
                    let mut inputs = Vec::with_capacity(batch.len());
                    let mut targets = Vec::with_capacity(batch.len());
                    for &i in batch {
                        let a = augment_sample(&samples[i], &cfg.augment, &mut aug_rng)?;
                        inputs.push(a.input);
                        targets.push(a.target);
                    }
                    (inputs, targets)
                };
                let r = batch_gradients(&self.model, &inputs, &targets, cfg).map_err(diverged)?;
                if !r.loss.is_finite() {
                    return Err(Error::Divergence { epoch, reason: format!("loss {}", r.loss) });
                }
                loss_sum += r.loss * batch.len() as f64;
                let grad_refs: Vec<&[f64]> = r.grads.iter().map(Vec::as_slice).collect();
                let mut params: Vec<&mut Tensor> = self.model.weights.tensors_mut().collect();
                self.adam.step(&mut params, &grad_refs, lr)?;
                if params.iter().any(|p| !p.is_finite()) {
                    return Err(Error::Divergence { epoch, reason: "non-finite parameter".into() });
                }
            }
            let val_sgcs = validation_sgcs(&self.model, data).map_err(diverged)?;
            self.log.push(EpochLog { epoch, lr, train_loss: loss_sum / train_idx.len() as f64, val_sgcs });
        }
        Ok(())
    }

    /// Re-initializes the bottleneck-adjacent layers for `bits_total` and
    /// clears their optimizer moments; every other tensor and moment is kept.
    pub fn resize_head(&mut self, bits_total: usize, seed: u64) -> Result<()> {
        let new_cfg = self.model.cfg.with_bits(bits_total);
        let weights = self.model.weights.resize_head(&new_cfg, seed)?;
        for (i, ((name, t), (_, old))) in weights.entries().iter().zip(self.model.weights.entries()).enumerate() {
            if crate::model::is_head_param(name) || t.shape() != old.shape() {
                self.adam.reset_slot(i, t.numel());
            }
        }
        self.model = Model::new(new_cfg, weights)?;
        Ok(())
    }

    pub fn into_outcome(self) -> TrainOutcome {
        TrainOutcome { model: self.model, log: self.log }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
}

/// Trains a freshly initialized model (seeded by `cfg.seed`) for `cfg.epochs`.
pub fn train_run(data: &Dataset, cfg: &TrainConfig, model_cfg: &ModelConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = Model::new(*model_cfg, init_model(model_cfg, cfg.seed)?)?;
    let mut trainer = Trainer::new(model);
    trainer.run(data, cfg)?;
    Ok(trainer.into_outcome())
}

/// Seed used for the head surgery before stage `stage`.
pub fn surgery_seed(run_seed: u64, stage: usize) -> u64 {
    mix(run_seed, Domain::Surgery, stage as u64)
}

/// Runs `cfg.stages` in order, shrinking the payload between stages by
/// replacing only the head layers.
pub fn staged_train(data: &Dataset, cfg: &TrainConfig, model_cfg: &ModelConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let Some(first) = cfg.stages.first() else {
        return Err(config("staged training needs at least one stage"));
    };
    let first_cfg = model_cfg.with_bits(first.bits_total);
    let model = Model::new(first_cfg, init_model(&first_cfg, cfg.seed)?)?;
    let mut trainer = Trainer::new(model);
    for (i, stage) in cfg.stages.iter().enumerate() {
        if i > 0 && stage.bits_total != trainer.model.cfg.bits_total {
            trainer.resize_head(stage.bits_total, surgery_seed(cfg.seed, i))?;
        }
        trainer.run(data, &cfg.for_stage(stage))?;
    }
    Ok(trainer.into_outcome())
}

/// Everything a training command needs: model, optimizer and split settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split_seed: u64,
    pub train_fraction: f64,
}

impl RunConfig {
    /// Parses a key-value run config. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KvMap::parse(text)?;
        let model = ModelConfig::read_kv(&kv, ModelConfig::desk(32))?;
        let train = TrainConfig::read_kv(&kv, TrainConfig::default())?;
        let split_seed = kv.get_or("split_seed", train.seed)?;
        let train_fraction = kv.get_or("train_fraction", crate::channelgen::DEFAULT_TRAIN_FRACTION)?;
        kv.deny_unknown()?;
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(config("train_fraction must lie in [0, 1]"));
        }
        Ok(Self { model, train, split_seed, train_fraction })
    }

    pub fn to_text(&self) -> String {
        let mut w = KvWriter::default();
        self.model.write_kv(&mut w);
        self.train.write_kv(&mut w);
        w.put("split_seed", self.split_seed).put("train_fraction", self.train_fraction);
        w.finish()
    }
}
