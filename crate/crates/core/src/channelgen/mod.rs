//! Synthetic clustered multipath channels and per-subband eigenvector CSI.
//!
//! A frequency-domain channel is a sum of plane-wave subpaths grouped in
//! clusters. Each subpath contributes a receive/transmit steering outer
//! product weighted by a complex gain and a delay phase evaluated at the
//! subband center frequency.

mod dataset;
mod eigen;

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng as _;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::{config, contract, Error, Result};
use crate::rng::{substream, Domain};

pub use dataset::{build_dataset, Dataset, DEFAULT_TRAIN_FRACTION};
pub use eigen::{canonicalize_phase, dominant_eigenvector, EigenPair, MAX_ITERATIONS, TOLERANCE};

/// Half-width of the uniform angular offset of a subpath around its cluster center.
pub const SUBPATH_ANGLE_SPREAD: f64 = 5.0 * PI / 180.0;
/// Subcarriers per resource block.
pub const SUBCARRIERS_PER_RB: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelParams {
    pub n_tx: usize,
    pub n_rx: usize,
    pub n_subband: usize,
    pub n_cluster: usize,
    pub n_subpath: usize,
    /// RMS delay spread in seconds; zero gives a frequency-flat channel.
    pub delay_spread: f64,
    pub carrier_hz: f64,
    pub subcarrier_hz: f64,
    pub n_rb: usize,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            n_tx: 8,
            n_rx: 2,
            n_subband: 12,
            n_cluster: 3,
            n_subpath: 4,
            delay_spread: 100e-9,
            carrier_hz: 3.5e9,
            subcarrier_hz: 15e3,
            n_rb: 48,
        }
    }
}

impl ChannelParams {
    /// Dimensions of the competition dataset (32 Tx, 4 Rx, 12 subbands).
    pub fn paper_scale() -> Self {
        Self { n_tx: 32, n_rx: 4, ..Self::default() }
    }

    /// Named presets: `desk`, `flat`, `selective`, `paper`.
    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" | "selective" => Ok(Self::default()),
            "flat" => Ok(Self { delay_spread: 0.0, ..Self::default() }),
            "paper" => Ok(Self::paper_scale()),
            other => Err(config(format!("unknown channel profile `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_tx", self.n_tx),
            ("n_rx", self.n_rx),
            ("n_subband", self.n_subband),
            ("n_cluster", self.n_cluster),
            ("n_subpath", self.n_subpath),
            ("n_rb", self.n_rb),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(config(format!("{name} must be at least 1")));
            }
        }
        if !(self.delay_spread.is_finite() && self.delay_spread >= 0.0) {
            return Err(config("delay_spread must be finite and nonnegative"));
        }
        if !(self.subcarrier_hz.is_finite() && self.subcarrier_hz > 0.0) {
            return Err(config("subcarrier_hz must be positive"));
        }
        if !(self.carrier_hz.is_finite() && self.carrier_hz > 0.0) {
            return Err(config("carrier_hz must be positive"));
        }
        Ok(())
    }

    /// Bandwidth of one subband: `n_rb / n_subband` resource blocks of 12 subcarriers.
    pub fn subband_bandwidth(&self) -> f64 {
        self.n_rb as f64 / self.n_subband as f64 * SUBCARRIERS_PER_RB as f64 * self.subcarrier_hz
    }

    /// Center frequency of subband `k` relative to the carrier, in Hz.
    pub fn subband_offset(&self, k: usize) -> f64 {
        (k as f64 - (self.n_subband as f64 - 1.0) / 2.0) * self.subband_bandwidth()
    }
}

/// Dense complex matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![Complex64::new(0.0, 0.0); rows * cols] }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(contract(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    /// `A^H A`, the Hermitian Gram matrix of the columns.
    pub fn gram(&self) -> CMatrix {
        let n = self.cols;
        let mut g = CMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for r in 0..self.rows {
                    acc += self.get(r, i).conj() * self.get(r, j);
                }
                g.data[i * n + j] = acc;
                g.data[j * n + i] = acc.conj();
            }
        }
        for i in 0..n {
            g.data[i * n + i].im = 0.0;
        }
        g
    }

    /// Numerical rank via Gram-Schmidt on the rows with a relative tolerance.
    pub fn rank(&self, tol: f64) -> usize {
        let scale = self.data.iter().map(|z| z.norm()).fold(0.0, f64::max);
        if scale == 0.0 {
            return 0;
        }
        let mut basis: Vec<Vec<Complex64>> = Vec::new();
        for r in 0..self.rows {
            let mut v: Vec<Complex64> = self.data[r * self.cols..(r + 1) * self.cols].to_vec();
            for b in &basis {
                let proj: Complex64 = b.iter().zip(&v).map(|(x, y)| x.conj() * y).sum();
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= proj * bi;
                }
            }
            let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if norm > tol * scale * (self.cols as f64).sqrt() {
                basis.push(v.into_iter().map(|z| z / norm).collect());
            }
        }
        basis.len()
    }

    pub fn frobenius_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }
}

/// Per-subband downlink channel matrices `H_k`, each `n_rx x n_tx`.
#[derive(Clone, Debug, PartialEq)]
pub struct FreqChannel {
    pub blocks: Vec<CMatrix>,
}

/// Per-subband eigenvector CSI: `n_subband` columns of length `n_tx`.
///
/// Stored column-major so each subband vector is contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct CsiSample {
    n_tx: usize,
    n_subband: usize,
    data: Vec<Complex64>,
}

impl CsiSample {
    pub fn new(n_tx: usize, n_subband: usize, data: Vec<Complex64>) -> Result<Self> {
        if n_tx == 0 || n_subband == 0 {
            return Err(contract("CSI sample needs at least one antenna and one subband"));
        }
        if data.len() != n_tx * n_subband {
            return Err(contract(format!(
                "CSI sample has {} entries, expected {n_tx}x{n_subband}",
                data.len()
            )));
        }
        Ok(Self { n_tx, n_subband, data })
    }

    pub fn from_columns(columns: Vec<Vec<Complex64>>) -> Result<Self> {
        let n_subband = columns.len();
        let n_tx = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != n_tx) {
            return Err(contract("CSI columns have unequal lengths"));
        }
        Self::new(n_tx, n_subband, columns.concat())
    }

    pub fn n_tx(&self) -> usize {
        self.n_tx
    }

    pub fn n_subband(&self) -> usize {
        self.n_subband
    }

    pub fn column(&self, k: usize) -> &[Complex64] {
        &self.data[k * self.n_tx..(k + 1) * self.n_tx]
    }

    pub fn column_mut(&mut self, k: usize) -> &mut [Complex64] {
        &mut self.data[k * self.n_tx..(k + 1) * self.n_tx]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[Complex64]> {
        self.data.chunks_exact(self.n_tx)
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn is_unit_norm(&self, tol: f64) -> bool {
        self.columns()
            .all(|c| (c.iter().map(|z| z.norm_sqr()).sum::<f64>() - 1.0).abs() <= tol)
    }

    /// Rescales every column to unit norm. Zero columns are an error.
    pub fn normalize_columns(&mut self) -> Result<()> {
        for k in 0..self.n_subband {
            let col = self.column_mut(k);
            let norm = col.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Degenerate(format!("subband {k} has zero or non-finite norm")));
            }
            col.iter_mut().for_each(|z| *z /= norm);
        }
        Ok(())
    }

    /// Applies canonical phase to every column.
    pub fn canonicalize(&mut self) {
        for k in 0..self.n_subband {
            canonicalize_phase(self.column_mut(k));
        }
    }

    /// Real representation per subband: `[Re(w_k); Im(w_k)]`, rows are subbands.
    pub fn to_real_rows(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.data.len());
        for col in self.columns() {
            out.extend(col.iter().map(|z| z.re));
            out.extend(col.iter().map(|z| z.im));
        }
        out
    }

    pub fn from_real_rows(n_tx: usize, n_subband: usize, rows: &[f64]) -> Result<Self> {
        if rows.len() != 2 * n_tx * n_subband {
            return Err(contract("real CSI representation has the wrong length"));
        }
        let data = rows
            .chunks_exact(2 * n_tx)
            .flat_map(|r| (0..n_tx).map(move |i| Complex64::new(r[i], r[n_tx + i])))
            .collect();
        Self::new(n_tx, n_subband, data)
    }
}

impl AsRef<CsiSample> for CsiSample {
    fn as_ref(&self) -> &CsiSample {
        self
    }
}

/// Steering vector of a half-wavelength uniform linear array.
fn steering(n: usize, angle: f64) -> Vec<Complex64> {
    let phase = PI * angle.sin();
    (0..n).map(|i| Complex64::from_polar(1.0, phase * i as f64)).collect()
}

struct Subpath {
    gain: Complex64,
    aoa: f64,
    aod: f64,
    delay: f64,
}

fn draw_subpaths(params: &ChannelParams, master_seed: u64, sample_index: u64) -> Vec<Subpath> {
    let mut rng = substream(master_seed, Domain::Channel, sample_index);
    let mut clusters = Vec::with_capacity(params.n_cluster);
    for _ in 0..params.n_cluster {
        let excess: f64 = Exp1.sample(&mut rng);
        let aod = rng.random_range(-PI / 2.0..PI / 2.0);
        let aoa = rng.random_range(-PI / 2.0..PI / 2.0);
        clusters.push((excess, aod, aoa));
    }
    // Exponential power-delay profile: a cluster with normalized excess x has
    // delay x * delay_spread and relative power exp(-x).
    let min_excess = clusters.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    let total_power: f64 = clusters.iter().map(|c| (-(c.0 - min_excess)).exp()).sum();

    let mut paths = Vec::with_capacity(params.n_cluster * params.n_subpath);
    for &(excess, aod_c, aoa_c) in &clusters {
        let x = excess - min_excess;
        let power = (-x).exp() / total_power / params.n_subpath as f64;
        let delay = x * params.delay_spread;
        let amp = (power / 2.0).sqrt();
        for _ in 0..params.n_subpath {
            let aod = aod_c + rng.random_range(-SUBPATH_ANGLE_SPREAD..SUBPATH_ANGLE_SPREAD);
            let aoa = aoa_c + rng.random_range(-SUBPATH_ANGLE_SPREAD..SUBPATH_ANGLE_SPREAD);
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            paths.push(Subpath { gain: Complex64::new(amp * re, amp * im), aoa, aod, delay });
        }
    }
    paths
}

/// Generates the per-subband channel of sample `sample_index`.
///
/// Subpath gains are circular Gaussian with cluster powers summing to one,
/// so `E ||H_k||_F^2 = n_rx * n_tx` with unit-modulus steering entries.
pub fn synth_freq_channel(
    params: &ChannelParams,
    master_seed: u64,
    sample_index: u64,
) -> Result<FreqChannel> {
    params.validate()?;
    let paths = draw_subpaths(params, master_seed, sample_index);
    let (nr, nt) = (params.n_rx, params.n_tx);
    let geometry: Vec<(Vec<Complex64>, Vec<Complex64>)> =
        paths.iter().map(|p| (steering(nr, p.aoa), steering(nt, p.aod))).collect();

    let mut blocks = Vec::with_capacity(params.n_subband);
    for k in 0..params.n_subband {
        let fk = params.subband_offset(k);
        let mut h = CMatrix::zeros(nr, nt);
        for (p, (a_rx, a_tx)) in paths.iter().zip(&geometry) {
            let coeff = if p.delay == 0.0 {
                p.gain
            } else {
                p.gain * Complex64::from_polar(1.0, -2.0 * PI * fk * p.delay)
            };
            for r in 0..nr {
                let row = coeff * a_rx[r];
                for t in 0..nt {
                    h.data[r * nt + t] += row * a_tx[t].conj();
                }
            }
        }
        if h.data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Numeric("channel synthesis".into()));
        }
        blocks.push(h);
    }
    Ok(FreqChannel { blocks })
}

/// Extracts the canonical dominant eigenvector of every subband.
pub fn extract_csi(hf: &FreqChannel) -> Result<CsiSample> {
    let n_tx = hf.blocks.first().map(CMatrix::cols).ok_or_else(|| contract("empty channel"))?;
    let mut columns = Vec::with_capacity(hf.blocks.len());
    for (k, h) in hf.blocks.iter().enumerate() {
        if h.cols() != n_tx {
            return Err(contract(format!("subband {k} has {} columns, expected {n_tx}", h.cols())));
        }
        let pair = dominant_eigenvector(h)
            .map_err(|e| Error::AtSubband { subband: k, source: Box::new(e) })?;
        columns.push(pair.vector);
    }
    CsiSample::from_columns(columns)
}
