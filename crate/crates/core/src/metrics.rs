//! Squared generalized cosine similarity and auxiliary reconstruction errors.

use std::fmt;

use num_complex::Complex64;

use crate::channelgen::CsiSample;
use crate::error::{contract, Error, Result};

/// `|w^H w'|^2 / (||w||^2 ||w'||^2)` for one subband pair.
pub fn cosine_sq(w: &[Complex64], w2: &[Complex64]) -> Option<f64> {
    let mut inner = Complex64::new(0.0, 0.0);
    let (mut n1, mut n2) = (0.0, 0.0);
    for (a, b) in w.iter().zip(w2) {
        inner += a.conj() * b;
        n1 += a.norm_sqr();
        n2 += b.norm_sqr();
    }
    if n1 == 0.0 || n2 == 0.0 {
        return None;
    }
    Some((inner.norm_sqr() / (n1 * n2)).clamp(0.0, 1.0))
}

fn check_shapes(truth: &CsiSample, pred: &CsiSample, i: usize) -> Result<()> {
    if truth.n_tx() != pred.n_tx() || truth.n_subband() != pred.n_subband() {
        return Err(contract(format!(
            "sample {i}: shape {}x{} vs {}x{}",
            truth.n_tx(),
            truth.n_subband(),
            pred.n_tx(),
            pred.n_subband()
        )));
    }
    Ok(())
}

/// Mean SGCS over the subbands of a single sample.
pub fn sample_sgcs(truth: &CsiSample, pred: &CsiSample) -> Result<f64> {
    sample_sgcs_indexed(truth, pred, 0)
}

fn sample_sgcs_indexed(truth: &CsiSample, pred: &CsiSample, i: usize) -> Result<f64> {
    check_shapes(truth, pred, i)?;
    let mut acc = 0.0;
    for k in 0..truth.n_subband() {
        acc += cosine_sq(truth.column(k), pred.column(k)).ok_or_else(|| {
            Error::Degenerate(format!("zero-norm column at sample {i}, subband {k}"))
        })?;
    }
    Ok(acc / truth.n_subband() as f64)
}

/// Average SGCS over all samples and subbands, accumulated sequentially.
pub fn sgcs<A: AsRef<CsiSample>, B: AsRef<CsiSample>>(truth: &[A], pred: &[B]) -> Result<f64> {
    Ok(per_sample_sgcs(truth, pred)?.iter().sum::<f64>() / truth.len() as f64)
}

pub fn per_sample_sgcs<A: AsRef<CsiSample>, B: AsRef<CsiSample>>(
    truth: &[A],
    pred: &[B],
) -> Result<Vec<f64>> {
    if truth.len() != pred.len() {
        return Err(contract(format!("{} truth samples vs {} predictions", truth.len(), pred.len())));
    }
    if truth.is_empty() {
        return Err(contract("empty evaluation set"));
    }
    truth
        .iter()
        .zip(pred)
        .enumerate()
        .map(|(i, (t, p))| sample_sgcs_indexed(t.as_ref(), p.as_ref(), i))
        .collect()
}

pub fn mse(v: &[f64], v2: &[f64]) -> Result<f64> {
    if v.len() != v2.len() {
        return Err(contract(format!("length {} vs {}", v.len(), v2.len())));
    }
    if v.is_empty() {
        return Err(contract("mse of empty vectors"));
    }
    Ok(v.iter().zip(v2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / v.len() as f64)
}

/// `sum (v - v2)^2 / sum v^2`.
pub fn nmse(v: &[f64], v2: &[f64]) -> Result<f64> {
    if v.len() != v2.len() {
        return Err(contract(format!("length {} vs {}", v.len(), v2.len())));
    }
    let energy: f64 = v.iter().map(|a| a * a).sum();
    if energy == 0.0 {
        return Err(Error::Degenerate("nmse reference is all zero".into()));
    }
    Ok(v.iter().zip(v2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / energy)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub sgcs: f64,
    pub mse: f64,
    pub nmse_db: f64,
    pub n_samples: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "sgcs,mse,nmse_db,n_samples";

    /// Scores `pred` against `truth` on the stacked real/imaginary representation.
    pub fn evaluate<A: AsRef<CsiSample>, B: AsRef<CsiSample>>(truth: &[A], pred: &[B]) -> Result<Self> {
        let sgcs = sgcs(truth, pred)?;
        let v: Vec<f64> = truth.iter().flat_map(|s| s.as_ref().to_real_rows()).collect();
        let v2: Vec<f64> = pred.iter().flat_map(|s| s.as_ref().to_real_rows()).collect();
        Ok(Self {
            sgcs,
            mse: mse(&v, &v2)?,
            nmse_db: 10.0 * nmse(&v, &v2)?.log10(),
            n_samples: truth.len(),
        })
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.sgcs, self.mse, self.nmse_db, self.n_samples)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "sgcs={:.6} mse={:.6e} nmse={:.3} dB over {} samples",
            self.sgcs, self.mse, self.nmse_db, self.n_samples
        )
    }
}
