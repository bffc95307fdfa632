use evcsi::channelgen::{dominant_eigenvector, CMatrix};
use evcsi::rng::{substream, Domain};
use nalgebra::{Complex, DMatrix};
use num_complex::Complex64;
use rand::Rng as _;
use rand_distr::StandardNormal;

pub const ORACLE_MATRICES: u64 = 1000;
pub const MIN_OVERLAP: f64 = 1.0 - 1e-8;

/// Dominant eigenvector of `H^H H` from a dense Hermitian eigendecomposition.
pub fn oracle(h: &CMatrix) -> (Vec<Complex64>, f64) {
    let (r, c) = (h.rows(), h.cols());
    let m = DMatrix::from_fn(r, c, |i, j| {
        let z = h.get(i, j);
        Complex::new(z.re, z.im)
    });
    let gram = m.adjoint() * &m;
    let eig = gram.symmetric_eigen();
    let (best, &value) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    let v = eig.eigenvectors.column(best).iter().map(|z| Complex64::new(z.re, z.im)).collect();
    (v, value)
}

pub fn random_matrix(seed: u64, index: u64) -> CMatrix {
    let mut rng = substream(seed, Domain::Channel, index);
    let rows = rng.random_range(1..=8);
    let cols = rng.random_range(1..=32);
    let data = (0..rows * cols)
        .map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
        .collect();
    CMatrix::from_rows(rows, cols, data).unwrap()
}

#[derive(Debug)]
pub struct OracleReport {
    pub worst_overlap: f64,
    pub worst_value_error: f64,
    pub failures: Vec<String>,
}

/// Compares power iteration against the dense solver on `count` random matrices.
pub fn compare(seed: u64, count: u64) -> OracleReport {
    let mut report = OracleReport { worst_overlap: 1.0, worst_value_error: 0.0, failures: Vec::new() };
    for i in 0..count {
        let h = random_matrix(seed, i);
        let pair = dominant_eigenvector(&h).unwrap();
        let (w, lambda) = oracle(&h);
        let ip: Complex64 = pair.vector.iter().zip(&w).map(|(a, b)| a.conj() * b).sum();
        let overlap = ip.norm_sqr();
        let value_error = (pair.value - lambda).abs() / lambda.max(1.0);
        report.worst_overlap = report.worst_overlap.min(overlap);
        report.worst_value_error = report.worst_value_error.max(value_error);
        if overlap < MIN_OVERLAP || value_error > 1e-9 {
            report.failures.push(format!(
                "matrix {i} ({}x{}): overlap {overlap}, eigenvalue {} vs {lambda}",
                h.rows(),
                h.cols(),
                pair.value
            ));
        }
    }
    report
}
