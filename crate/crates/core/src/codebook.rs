//! DFT-grid codebook baseline: each subband eigenvector is replaced by the
//! closest of `O * n_tx` oversampled DFT beams.

use std::f64::consts::TAU;

use num_complex::Complex64;

use crate::channelgen::CsiSample;
use crate::error::{config, contract, Result};

/// Label used for baseline results.
pub const BASELINE_LABEL: &str = "DFT-grid";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CodebookConfig {
    pub n_tx: usize,
    pub oversampling: usize,
}

impl CodebookConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tx == 0 || self.oversampling == 0 || self.n_beams() < 2 {
            return Err(config("codebook needs n_tx >= 1, oversampling >= 1 and at least two beams"));
        }
        Ok(())
    }

    pub fn n_beams(&self) -> usize {
        self.oversampling * self.n_tx
    }

    /// `ceil(log2(O * n_tx))`.
    pub fn bits_per_subband(&self) -> usize {
        (usize::BITS - (self.n_beams() - 1).leading_zeros()) as usize
    }
}

#[derive(Clone, Debug)]
pub struct DftCodebook {
    cfg: CodebookConfig,
    beams: Vec<Vec<Complex64>>,
}

/// Beam `m`, entry `n`: `exp(j 2 pi n m / (O n_tx)) / sqrt(n_tx)`.
pub fn build_dft_codebook(cfg: CodebookConfig) -> Result<DftCodebook> {
    cfg.validate()?;
    let total = cfg.n_beams();
    let scale = 1.0 / (cfg.n_tx as f64).sqrt();
    let beams = (0..total)
        .map(|m| {
            (0..cfg.n_tx)
                .map(|n| {
                    // Reduce the phase index first to keep the angle small.
                    let k = (n * m) % total;
                    Complex64::from_polar(scale, TAU * k as f64 / total as f64)
                })
                .collect()
        })
        .collect();
    Ok(DftCodebook { cfg, beams })
}

impl DftCodebook {
    pub fn config(&self) -> CodebookConfig {
        self.cfg
    }

    pub fn beams(&self) -> &[Vec<Complex64>] {
        &self.beams
    }

    /// Feedback overhead for `n_subband` subbands.
    pub fn feedback_bits(&self, n_subband: usize) -> usize {
        n_subband * self.cfg.bits_per_subband()
    }

    /// Index of the beam maximizing `|w^H b|` (lowest on ties).
    pub fn best_beam(&self, w: &[Complex64]) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (m, b) in self.beams.iter().enumerate() {
            let ip: Complex64 = w.iter().zip(b).map(|(x, y)| x.conj() * y).sum();
            let v = ip.norm_sqr();
            if v > best.1 {
                best = (m, v);
            }
        }
        best.0
    }
}

pub fn codebook_encode(w: &CsiSample, codebook: &DftCodebook) -> Result<Vec<usize>> {
    if w.n_tx() != codebook.cfg.n_tx {
        return Err(contract(format!("sample has {} antennas, codebook {}", w.n_tx(), codebook.cfg.n_tx)));
    }
    Ok(w.columns().map(|c| codebook.best_beam(c)).collect())
}

pub fn codebook_decode(indices: &[usize], codebook: &DftCodebook) -> Result<CsiSample> {
    let cols = indices
        .iter()
        .map(|&m| {
            codebook
                .beams
                .get(m)
                .cloned()
                .ok_or_else(|| contract(format!("beam {m} out of range for {} beams", codebook.beams.len())))
        })
        .collect::<Result<Vec<_>>>()?;
    CsiSample::from_columns(cols)
}

/// Quantizes every sample to the grid.
pub fn codebook_reconstruct(samples: &[CsiSample], codebook: &DftCodebook) -> Result<Vec<CsiSample>> {
    samples.iter().map(|s| codebook_decode(&codebook_encode(s, codebook)?, codebook)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::rotate;
    use crate::channelgen::{build_dataset, ChannelParams};
    use crate::metrics::{cosine_sq, sgcs};

    fn book(n_tx: usize, o: usize) -> DftCodebook {
        build_dft_codebook(CodebookConfig { n_tx, oversampling: o }).unwrap()
    }

    #[test]
    fn orthonormal_without_oversampling() {
        let cb = book(8, 1);
        for (i, a) in cb.beams().iter().enumerate() {
            for (j, b) in cb.beams().iter().enumerate() {
                let ip: Complex64 = a.iter().zip(b).map(|(x, y)| x.conj() * y).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((ip.norm() - want).abs() < 1e-12, "{i} {j}");
            }
        }
    }

    #[test]
    fn sizes_and_norms() {
        let cb = book(8, 4);
        assert_eq!(cb.beams().len(), 32);
        assert_eq!(cb.feedback_bits(12), 60);
        assert_eq!(CodebookConfig { n_tx: 8, oversampling: 3 }.bits_per_subband(), 5);
        for b in cb.beams() {
            assert!((b.iter().map(|z| z.norm_sqr()).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for i in 0..32 {
            for j in 0..i {
                assert!(cosine_sq(&cb.beams()[i], &cb.beams()[j]).unwrap() < 1.0 - 1e-9);
            }
        }
        assert!(build_dft_codebook(CodebookConfig { n_tx: 1, oversampling: 1 }).is_err());
        assert!(build_dft_codebook(CodebookConfig { n_tx: 8, oversampling: 0 }).is_err());
    }

    #[test]
    fn beams_select_themselves() {
        let cb = book(8, 2);
        for (m, b) in cb.beams().iter().enumerate() {
            let s = CsiSample::from_columns(vec![b.clone()]).unwrap();
            assert_eq!(codebook_encode(&s, &cb).unwrap(), vec![m]);
            let rec = codebook_decode(&[m], &cb).unwrap();
            assert!((sgcs(&[s], &[rec]).unwrap() - 1.0).abs() < 1e-12);
        }
        assert!(codebook_decode(&[16], &cb).is_err());
    }

    #[test]
    fn selection_matches_brute_force_and_ignores_phase() {
        let data = build_dataset(&ChannelParams::default(), 20, 8).unwrap();
        let cb = book(8, 4);
        for s in data.samples() {
            let idx = codebook_encode(s, &cb).unwrap();
            for (k, col) in s.columns().enumerate() {
                let scores: Vec<f64> = cb.beams().iter().map(|b| cosine_sq(col, b).unwrap()).collect();
                let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                assert!(scores[idx[k]] >= best - 1e-12);
            }
            let thetas: Vec<f64> = (0..12).map(|k| 0.7 * k as f64 + 0.1).collect();
            let r = rotate(s, &thetas).unwrap();
            let a = sgcs(&[s], &codebook_reconstruct(&[s.clone()], &cb).unwrap()).unwrap();
            let b = sgcs(&[r.clone()], &codebook_reconstruct(&[r], &cb).unwrap()).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn oversampling_never_hurts() {
        let data = build_dataset(&ChannelParams::default(), 20, 9).unwrap();
        let mut prev = 0.0;
        for o in [1, 2, 4, 8] {
            let cb = book(8, o);
            let v = sgcs(data.samples(), &codebook_reconstruct(data.samples(), &cb).unwrap()).unwrap();
            assert!(v >= prev - 1e-12, "O={o}");
            prev = v;
        }
        assert!(codebook_encode(&data.samples()[0], &book(4, 2)).is_err());
    }
}
