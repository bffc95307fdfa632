//! Dominant eigenvector of `H^H H` by power iteration.
//!
//! Each iteration applies `G^16` (four repeated squarings of the scaled Gram
//! matrix `G`), which shrinks the subdominant components 16 times faster per
//! step than plain iteration on `G`. Termination is on the residual
//! `||G w - lambda w|| <= TOLERANCE * lambda` measured against `G` itself.

use num_complex::Complex64;

use super::CMatrix;
use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 500;
pub const TOLERANCE: f64 = 1e-10;
const SQUARINGS: usize = 4;
const TIE_BREAK: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct EigenPair {
    /// Unit-norm eigenvector with canonical phase.
    pub vector: Vec<Complex64>,
    /// Largest eigenvalue of `H^H H`.
    pub value: f64,
}

/// Rotates `v` so that its largest-modulus entry (lowest index on ties) is real
/// and nonnegative. Idempotent.
pub fn canonicalize_phase(v: &mut [Complex64]) {
    let mut best = 0;
    let mut best_mod = -1.0;
    for (i, z) in v.iter().enumerate() {
        let m = z.norm();
        if m > best_mod {
            best = i;
            best_mod = m;
        }
    }
    if best_mod <= 0.0 {
        return;
    }
    let rot = v[best].conj() / best_mod;
    for z in v.iter_mut() {
        *z *= rot;
    }
    v[best] = Complex64::new(best_mod, 0.0);
}

fn matvec(m: &[Complex64], n: usize, v: &[Complex64]) -> Vec<Complex64> {
    (0..n)
        .map(|i| m[i * n..(i + 1) * n].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn matmul(a: &[Complex64], b: &[Complex64], n: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == Complex64::new(0.0, 0.0) {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

fn norm(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn max_abs(m: &[Complex64]) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn rayleigh(g: &[Complex64], n: usize, w: &[Complex64]) -> (f64, f64) {
    let gw = matvec(g, n, w);
    let lambda: f64 = w.iter().zip(&gw).map(|(a, b)| (a.conj() * b).re).sum();
    let residual = gw
        .iter()
        .zip(w)
        .map(|(a, b)| (a - b * lambda).norm_sqr())
        .sum::<f64>()
        .sqrt();
    (lambda, residual)
}

/// Solves `H^H H w = lambda w` for the largest `lambda`.
pub fn dominant_eigenvector(h: &CMatrix) -> Result<EigenPair> {
    if h.as_slice().iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Numeric("eigenvector input".into()));
    }
    let n = h.cols();
    let gram = h.gram();
    let scale = max_abs(gram.as_slice());
    if scale == 0.0 {
        return Err(Error::Degenerate("all-zero channel matrix".into()));
    }
    let g: Vec<Complex64> = gram.as_slice().iter().map(|z| z / scale).collect();

    let mut power = g.clone();
    for _ in 0..SQUARINGS {
        power = matmul(&power, &power, n);
        let s = max_abs(&power);
        power.iter_mut().for_each(|z| *z /= s);
    }

    let mut w = vec![Complex64::new(1.0 / (n as f64).sqrt(), 0.0); n];
    // Start vector in the null space of the iteration matrix: nudge it.
    let power_scale = max_abs(&power) * n as f64;
    let mut nudge = 0;
    while norm(&matvec(&power, n, &w)) <= 1e-12 * power_scale && nudge < n {
        w[nudge] += TIE_BREAK;
        let s = norm(&w);
        w.iter_mut().for_each(|z| *z /= s);
        nudge += 1;
    }

    let mut rel = f64::INFINITY;
    for _ in 0..MAX_ITERATIONS {
        let next = matvec(&power, n, &w);
        let s = norm(&next);
        if s == 0.0 || !s.is_finite() {
            return Err(Error::Convergence { residual: rel });
        }
        w = next.into_iter().map(|z| z / s).collect();
        let (lambda, residual) = rayleigh(&g, n, &w);
        rel = if lambda > 0.0 { residual / lambda } else { f64::INFINITY };
        if rel <= TOLERANCE {
            canonicalize_phase(&mut w);
            return Ok(EigenPair { vector: w, value: lambda * scale });
        }
    }
    Err(Error::Convergence { residual: rel })
}
