//! Central finite-difference validation of reverse-mode gradients.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Denominator floor of the relative error, so entries whose true gradient
/// is essentially zero are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, element)` of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares the reverse-mode gradient of `f` at `points` to central differences of `f`.
pub fn grad_check<F>(f: F, points: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_against(&f, &f, points, step)
}

/// Reverse-mode gradient of `f` checked against central differences of a
/// separate scalar function `oracle`.
pub fn grad_check_against<F, O>(f: F, oracle: O, points: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    O: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| g.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.constant(p.clone())).collect();
        let out = oracle(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), checked: 0 };
    let mut work = points.to_vec();
    for (i, p) in points.iter().enumerate() {
        for j in 0..p.numel() {
            let x0 = p.data()[j];
            work[i].data_mut()[j] = x0 + step;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x0 - step;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::vector(vec![0.3, -1.7, 2.2, 0.01]);
        let r = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.sum(sq)
            },
            &[x],
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn both_inputs_are_checked() {
        let a = Tensor::matrix(2, 3, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap();
        let b = Tensor::matrix(3, 2, vec![1.0, -1.0, 0.5, 0.25, -0.75, 2.0]).unwrap();
        let r = grad_check(
            |g, v| {
                let p = g.matmul(v[0], v[1])?;
                let q = g.mul(p, p)?;
                g.sum(q)
            },
            &[a, b],
            1e-4,
        )
        .unwrap();
        assert_eq!(r.checked, 12);
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // Forward uses a straight-through substitute, oracle differentiates the real function.
        let x = Tensor::vector(vec![0.4, 0.9]);
        let r = grad_check_against(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                let fwd = g.value(sq).clone();
                let st = g.straight_through(v[0], fwd)?;
                g.sum(st)
            },
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.sum(sq)
            },
            &[x],
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.1);
    }
}
