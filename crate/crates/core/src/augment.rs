//! Training-time augmentation of CSI samples: noise injection, flipping,
//! cyclic and random subband shifts, and per-subband phase rotation.

use std::f64::consts::TAU;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::channelgen::CsiSample;
use crate::error::{config, contract, Result};
use crate::kv::{KvMap, KvWriter};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub noise_alpha: f64,
    pub noise_sigma: f64,
    pub p_flip: f64,
    pub p_cyclic: f64,
    pub p_shuffle: f64,
    pub p_rotate: f64,
    /// Draw an independent angle per subband instead of one per sample.
    pub rotate_per_subband: bool,
    /// Train noisy inputs against the clean sample (denoising target).
    pub noise_clean_target: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_alpha: 0.0,
            noise_sigma: 1.0,
            p_flip: 0.25,
            p_cyclic: 0.25,
            p_shuffle: 0.25,
            p_rotate: 0.25,
            rotate_per_subband: true,
            noise_clean_target: true,
        }
    }
}

impl AugmentConfig {
    /// No transform is ever applied.
    pub fn disabled() -> Self {
        Self { noise_alpha: 0.0, p_flip: 0.0, p_cyclic: 0.0, p_shuffle: 0.0, p_rotate: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.p_flip, self.p_cyclic, self.p_shuffle, self.p_rotate];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(config("augmentation probabilities must lie in [0, 1]"));
        }
        // The four transforms are mutually exclusive per sample.
        if probs.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(config("augmentation probabilities must sum to at most 1"));
        }
        if !(self.noise_alpha >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(config("noise_alpha and noise_sigma must be nonnegative"));
        }
        Ok(())
    }

    pub fn is_disabled(&self) -> bool {
        self.noise_alpha == 0.0 && self.p_flip + self.p_cyclic + self.p_shuffle + self.p_rotate == 0.0
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.put("noise_alpha", self.noise_alpha)
            .put("noise_sigma", self.noise_sigma)
            .put("p_flip", self.p_flip)
            .put("p_cyclic", self.p_cyclic)
            .put("p_shuffle", self.p_shuffle)
            .put("p_rotate", self.p_rotate)
            .put("rotate_per_subband", self.rotate_per_subband)
            .put("noise_clean_target", self.noise_clean_target);
    }

    pub fn read_kv(kv: &KvMap, base: AugmentConfig) -> Result<Self> {
        let cfg = Self {
            noise_alpha: kv.get_or("noise_alpha", base.noise_alpha)?,
            noise_sigma: kv.get_or("noise_sigma", base.noise_sigma)?,
            p_flip: kv.get_or("p_flip", base.p_flip)?,
            p_cyclic: kv.get_or("p_cyclic", base.p_cyclic)?,
            p_shuffle: kv.get_or("p_shuffle", base.p_shuffle)?,
            p_rotate: kv.get_or("p_rotate", base.p_rotate)?,
            rotate_per_subband: kv.get_or("rotate_per_subband", base.rotate_per_subband)?,
            noise_clean_target: kv.get_or("noise_clean_target", base.noise_clean_target)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `W + alpha * Y` with real and imaginary parts of `Y` drawn from N(0, sigma^2).
/// The result is not renormalized.
pub fn noise_inject(w: &CsiSample, alpha: f64, sigma: f64, rng: &mut Rng) -> CsiSample {
    if alpha == 0.0 || sigma == 0.0 {
        return w.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and nonnegative");
    let data = w
        .as_slice()
        .iter()
        .map(|z| {
            let re = normal.sample(rng);
            let im = normal.sample(rng);
            z + Complex64::new(alpha * re, alpha * im)
        })
        .collect();
    CsiSample::new(w.n_tx(), w.n_subband(), data).expect("shape preserved")
}

fn permute_columns(w: &CsiSample, source_of: impl Fn(usize) -> usize) -> CsiSample {
    let cols = (0..w.n_subband()).map(|k| w.column(source_of(k)).to_vec()).collect();
    CsiSample::from_columns(cols).expect("shape preserved")
}

/// Reverses the subband order.
pub fn flip_subband(w: &CsiSample) -> CsiSample {
    let n = w.n_subband();
    permute_columns(w, |k| n - 1 - k)
}

/// Reverses the antenna order within every subband.
pub fn flip_antenna(w: &CsiSample) -> CsiSample {
    let cols = w.columns().map(|c| c.iter().rev().copied().collect()).collect();
    CsiSample::from_columns(cols).expect("shape preserved")
}

/// Moves the last subband to the front `p` times: output column
/// `(k + p) mod N_sb` is input column `k`.
pub fn cyclic_shift(w: &CsiSample, p: usize) -> Result<CsiSample> {
    let n = w.n_subband();
    if p >= n {
        return Err(contract(format!("shift {p} out of range for {n} subbands")));
    }
    Ok(permute_columns(w, |k| (k + n - p) % n))
}

/// Applies a uniformly random subband permutation. Returns the sample and
/// the permutation (`out[k] = in[perm[k]]`).
pub fn random_shuffle(w: &CsiSample, rng: &mut Rng) -> (CsiSample, Vec<usize>) {
    let mut perm: Vec<usize> = (0..w.n_subband()).collect();
    perm.shuffle(rng);
    (permute_columns(w, |k| perm[k]), perm)
}

/// Rotates subband `k` by `e^{j theta_k}` via the cosine/sine mixing of its
/// real and imaginary parts. `thetas` has one angle or one per subband.
pub fn rotate(w: &CsiSample, thetas: &[f64]) -> Result<CsiSample> {
    let n = w.n_subband();
    if thetas.len() != 1 && thetas.len() != n {
        return Err(contract(format!("{} rotation angles for {n} subbands", thetas.len())));
    }
    let cols = (0..n)
        .map(|k| {
            let theta = if thetas.len() == 1 { thetas[0] } else { thetas[k] };
            let (s, c) = theta.sin_cos();
            w.column(k)
                .iter()
                .map(|z| Complex64::new(c * z.re - s * z.im, s * z.re + c * z.im))
                .collect()
        })
        .collect();
    CsiSample::from_columns(cols)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Applied {
    None,
    Flip,
    Cyclic(usize),
    Shuffle(Vec<usize>),
    Rotate(Vec<f64>),
}

/// Model input, training target, and what was done.
#[derive(Clone, Debug)]
pub struct Augmented {
    pub input: CsiSample,
    pub target: CsiSample,
    pub applied: Applied,
    pub noisy: bool,
}

/// Draws at most one geometric transform (mutually exclusive by probability
/// mass), then optionally injects noise into the input.
pub fn augment_sample(w: &CsiSample, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Augmented> {
    let u: f64 = rng.random();
    let n = w.n_subband();
    let mut edge = cfg.p_flip;
    let (sample, applied) = if u < edge {
        (flip_subband(w), Applied::Flip)
    } else if u < {
        edge += cfg.p_cyclic;
        edge
    } {
        let p = if n > 1 { rng.random_range(1..n) } else { 0 };
        (cyclic_shift(w, p)?, Applied::Cyclic(p))
    } else if u < {
        edge += cfg.p_shuffle;
        edge
    } {
        let (s, perm) = random_shuffle(w, rng);
        (s, Applied::Shuffle(perm))
    } else if u < edge + cfg.p_rotate {
        let count = if cfg.rotate_per_subband { n } else { 1 };
        let thetas: Vec<f64> = (0..count).map(|_| rng.random_range(0.0..TAU)).collect();
        (rotate(w, &thetas)?, Applied::Rotate(thetas))
    } else {
        (w.clone(), Applied::None)
    };
    let noisy = cfg.noise_alpha > 0.0 && cfg.noise_sigma > 0.0;
    let input = if noisy { noise_inject(&sample, cfg.noise_alpha, cfg.noise_sigma, rng) } else { sample.clone() };
    let target = if noisy && !cfg.noise_clean_target { input.clone() } else { sample };
    Ok(Augmented { input, target, applied, noisy })
}
