use super::{Tensor, GELU_C, GELU_K};
use crate::error::{contract, Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRowBias(Var, Var),
    Reshape(Var),
    Transpose(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, seq: usize, heads: usize, probs: Vec<f64> },
    StraightThrough(Var),
    RowNormalize { x: Var, norms: Vec<f64> },
    RowCosine { pred: Var, truth: Var, squared: bool },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

/// Tape holding values, operations and accumulated gradients.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    contract(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn axpy(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `c = alpha * a * b + beta * c` for row-major matrices, with optional
/// transposition of either operand expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    // a is m x k (or k x m when transposed), b is k x n (or n x k).
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the slices hold m*k, k*n and m*n elements and the strides
    // describe exactly those row-major layouts (or their transposes).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, needs_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(name.to_string()));
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, grad: None, needs_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient, if backward has reached this node.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    fn zip_same(&mut self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("div", a, b, |x, y| x / y)?;
        self.push("div", t, Op::Div(a, b), &[a, b])
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(x);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect()).expect("same shape")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.map(x, |a| a * c);
        self.push("scale", t, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.map(x, |a| a + c);
        self.push("add_scalar", t, Op::AddScalar(x), &[x])
    }

    /// `x[r, :] + bias` for every row of a matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if self.shape(bias) != [c] {
            return Err(shape_err("add_row_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(c) {
            axpy(row, b);
        }
        self.push("add_row_bias", Tensor::new(vec![r, c], data)?, Op::AddRowBias(x, bias), &[x, bias])
    }

    /// `x W + b` with `W` stored as `in x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row_bias(xw, b)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(shape_err("reshape", self.shape(x), &shape));
        }
        let t = Tensor::new(shape, self.value(x).data().to_vec())?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        self.reshape(x, vec![n])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        let src = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", Tensor::new(vec![c, r], data)?, Op::Transpose(x), &[x])
    }

    /// Concatenates matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(contract("concat needs at least one part and axis 0 or 1"));
        }
        let dims = parts.iter().map(|&p| self.dims2(p)).collect::<Result<Vec<_>>>()?;
        let (r0, c0) = dims[0];
        let shape = if axis == 0 {
            if dims.iter().any(|d| d.1 != c0) {
                return Err(contract("concat rows: column counts differ"));
            }
            vec![dims.iter().map(|d| d.0).sum(), c0]
        } else {
            if dims.iter().any(|d| d.0 != r0) {
                return Err(contract("concat columns: row counts differ"));
            }
            vec![r0, dims.iter().map(|d| d.1).sum()]
        };
        let mut data = Vec::with_capacity(shape[0] * shape[1]);
        if axis == 0 {
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
        } else {
            for r in 0..r0 {
                for (&p, &(_, c)) in parts.iter().zip(&dims) {
                    data.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
                }
            }
        }
        let op = Op::Concat { parts: parts.to_vec(), axis };
        self.push("concat", Tensor::new(shape, data)?, op, parts)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let c = *v.shape().last().ok_or_else(|| contract("softmax of a scalar"))?;
        let mut data = v.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.push("softmax", t, Op::Softmax(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(contract("mean of an empty tensor"));
        }
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, super::gelu_scalar);
        self.push("gelu", t, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, sigmoid);
        self.push("sigmoid", t, Op::Sigmoid(x), &[x])
    }

    /// Normalizes each row of `x` to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let src = self.value(x).data();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[i] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm { x, gain, bias, xhat, rstd };
        self.push("layer_norm", Tensor::new(vec![r, c], out)?, op, &[x, gain, bias])
    }

    /// Scaled dot-product attention core for a batch of sequences.
    ///
    /// `q`, `k`, `v` are `(batch * seq) x width`; head `h` uses columns
    /// `h*d .. (h+1)*d` with `d = width / heads`. Rows of different
    /// sequences never attend to each other.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Result<Var> {
        let (rows, width) = self.dims2(q)?;
        if self.shape(k) != [rows, width] || self.shape(v) != [rows, width] {
            return Err(shape_err("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!("width {width} not divisible by {heads} heads")));
        }
        if seq == 0 || rows % seq != 0 {
            return Err(contract(format!("{rows} rows is not a whole number of length-{seq} sequences")));
        }
        let d = width / heads;
        let batch = rows / seq;
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * width];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * width + h * d..][..d];
                    for j in 0..seq {
                        let kj = &kd[(b * seq + j) * width + h * d..][..d];
                        p[i * seq + j] = scale * qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>();
                    }
                    softmax_in_place(&mut p[i * seq..(i + 1) * seq]);
                    let oi = &mut out[(b * seq + i) * width + h * d..][..d];
                    for j in 0..seq {
                        let pij = p[i * seq + j];
                        let vj = &vd[(b * seq + j) * width + h * d..][..d];
                        for (o, vv) in oi.iter_mut().zip(vj) {
                            *o += pij * vv;
                        }
                    }
                }
            }
        }
        let op = Op::Attention { q, k, v, seq, heads, probs };
        self.push("attention", Tensor::new(vec![rows, width], out)?, op, &[q, k, v])
    }

    /// Forward value replaced by `forward`, gradient passed through unchanged.
    pub fn straight_through(&mut self, x: Var, forward: Tensor) -> Result<Var> {
        if forward.shape() != self.shape(x) {
            return Err(shape_err("straight_through", self.shape(x), forward.shape()));
        }
        self.push("straight_through", forward, Op::StraightThrough(x), &[x])
    }

    /// Scales every row of a matrix to unit Euclidean norm.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        let mut data = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(r);
        for (i, row) in data.chunks_exact_mut(c).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Degenerate(format!("row {i} has zero norm")));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let op = Op::RowNormalize { x, norms };
        self.push("row_normalize", Tensor::new(vec![r, c], data)?, op, &[x])
    }

    /// Per-row complex cosine `|t^H p| / (||t|| ||p||)` (or its square), where
    /// each row stores `[Re; Im]` halves of a complex vector.
    pub fn row_cosine(&mut self, pred: Var, truth: Var, squared: bool) -> Result<Var> {
        let (r, c) = self.dims2(pred)?;
        if self.shape(truth) != [r, c] || c % 2 != 0 {
            return Err(shape_err("row_cosine", self.shape(pred), self.shape(truth)));
        }
        let (pd, td) = (self.value(pred).data(), self.value(truth).data());
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let s = cosine_terms(&pd[i * c..(i + 1) * c], &td[i * c..(i + 1) * c])
                .ok_or_else(|| Error::Degenerate(format!("row {i} has zero norm")))?;
            let cos = s.modulus / (s.p_norm * s.t_norm);
            out.push(if squared { cos * cos } else { cos });
        }
        let op = Op::RowCosine { pred, truth, squared };
        self.push("row_cosine", Tensor::vector(out), op, &[pred, truth])
    }

    /// Backpropagates from scalar `loss`, adding into every reachable node's
    /// accumulated gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(contract(format!("backward from non-scalar shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => axpy(acc, &g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut send = |v: Var, contribution: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => axpy(acc, &contribution),
                slot @ None => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a)?;
                let n = self.shape(*b)[1];
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.value(*b).data(), true, &mut da, 0.0);
                    send(*a, da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, g, false, &mut db, 0.0);
                    send(*b, db);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                send(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                send(*b, g.iter().zip(av).map(|(x, y)| x * y).collect());
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                send(*a, g.iter().zip(bv).map(|(x, y)| x / y).collect());
                send(*b, g.iter().zip(av.iter().zip(bv)).map(|(x, (p, q))| -x * p / (q * q)).collect());
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) | Op::Reshape(x) | Op::StraightThrough(x) => send(*x, g.to_vec()),
            Op::AddRowBias(x, b) => {
                let c = self.shape(*b)[0];
                let mut db = vec![0.0; c];
                for row in g.chunks_exact(c) {
                    axpy(&mut db, row);
                }
                send(*x, g.to_vec());
                send(*b, db);
            }
            Op::Transpose(x) => {
                let (r, c) = self.dims2(*x)?;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                send(*x, dx);
            }
            Op::Concat { parts, axis } => {
                let total_cols = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.dims2(p)?;
                    let piece = if *axis == 0 {
                        g[offset * total_cols..(offset + r) * total_cols].to_vec()
                    } else {
                        (0..r)
                            .flat_map(|i| g[i * total_cols + offset..][..c].iter().copied())
                            .collect()
                    };
                    offset += if *axis == 0 { r } else { c };
                    send(p, piece);
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = *node.value.shape().last().expect("checked in forward");
                let mut dx = vec![0.0; y.len()];
                for ((dr, yr), gr) in dx.chunks_exact_mut(c).zip(y.chunks_exact(c)).zip(g.chunks_exact(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*x, dx);
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                send(*x, vec![g[0] / n as f64; n]);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                send(*x, xv.iter().zip(g).map(|(&a, gi)| gi * gelu_grad(a)).collect());
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                send(*x, y.iter().zip(g).map(|(s, gi)| gi * s * (1.0 - s)).collect());
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (r, c) = self.dims2(*x)?;
                let gv = self.value(*gain).data();
                let mut dx = vec![0.0; r * c];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for i in 0..r {
                    let gr = &g[i * c..(i + 1) * c];
                    let hr = &xhat[i * c..(i + 1) * c];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..c {
                        let dh = gr[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        dg[j] += gr[j] * hr[j];
                        db[j] += gr[j];
                    }
                    mean_dh /= c as f64;
                    mean_dh_h /= c as f64;
                    for j in 0..c {
                        let dh = gr[j] * gv[j];
                        dx[i * c + j] = rstd[i] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                send(*x, dx);
                send(*gain, dg);
                send(*bias, db);
            }
            Op::Attention { q, k, v, seq, heads, probs } => {
                let (rows, width) = self.dims2(*q)?;
                let (seq, heads) = (*seq, *heads);
                let d = width / heads;
                let scale = 1.0 / (d as f64).sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![0.0; rows * width];
                let mut dk = vec![0.0; rows * width];
                let mut dv = vec![0.0; rows * width];
                let mut dp = vec![0.0; seq];
                for b in 0..rows / seq {
                    for h in 0..heads {
                        let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                        let at = |i: usize| (b * seq + i) * width + h * d;
                        for i in 0..seq {
                            let gi = &g[at(i)..][..d];
                            for j in 0..seq {
                                let vj = &vd[at(j)..][..d];
                                dp[j] = gi.iter().zip(vj).map(|(a, c)| a * c).sum();
                                let pij = p[i * seq + j];
                                for (dvv, gg) in dv[at(j)..][..d].iter_mut().zip(gi) {
                                    *dvv += pij * gg;
                                }
                            }
                            let dot: f64 = (0..seq).map(|j| p[i * seq + j] * dp[j]).sum();
                            for j in 0..seq {
                                let ds = p[i * seq + j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for t in 0..d {
                                    dq[at(i) + t] += ds * kd[at(j) + t];
                                    dk[at(j) + t] += ds * qd[at(i) + t];
                                }
                            }
                        }
                    }
                }
                send(*q, dq);
                send(*k, dk);
                send(*v, dv);
            }
            Op::RowNormalize { x, norms } => {
                let y = node.value.data();
                let c = node.value.shape()[1];
                let mut dx = vec![0.0; y.len()];
                for (i, n) in norms.iter().enumerate() {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                send(*x, dx);
            }
            Op::RowCosine { pred, truth, squared } => {
                let (r, c) = self.dims2(*pred)?;
                let half = c / 2;
                let (pd, td) = (self.value(*pred).data(), self.value(*truth).data());
                let mut dpred = vec![0.0; r * c];
                let mut dtruth = vec![0.0; r * c];
                for i in 0..r {
                    let (pr, tr) = (&pd[i * c..(i + 1) * c], &td[i * c..(i + 1) * c]);
                    let s = cosine_terms(pr, tr).expect("checked in forward");
                    let denom = s.p_norm * s.t_norm;
                    let cos = s.modulus / denom;
                    // d|z|/dz-parts; zero at the nondifferentiable point z = 0.
                    let (ua, ub) = if s.modulus > 0.0 { (s.re / s.modulus, s.im / s.modulus) } else { (0.0, 0.0) };
                    let outer = if *squared { g[i] * 2.0 * cos } else { g[i] };
                    for n in 0..half {
                        let (p_re, p_im, t_re, t_im) = (pr[n], pr[half + n], tr[n], tr[half + n]);
                        // re = sum t_re p_re + t_im p_im, im = sum t_re p_im - t_im p_re
                        let dm_dp_re = ua * t_re - ub * t_im;
                        let dm_dp_im = ua * t_im + ub * t_re;
                        let dm_dt_re = ua * p_re + ub * p_im;
                        let dm_dt_im = ua * p_im - ub * p_re;
                        let pp = s.p_norm * s.p_norm;
                        let tt = s.t_norm * s.t_norm;
                        dpred[i * c + n] = outer * (dm_dp_re / denom - cos * p_re / pp);
                        dpred[i * c + half + n] = outer * (dm_dp_im / denom - cos * p_im / pp);
                        dtruth[i * c + n] = outer * (dm_dt_re / denom - cos * t_re / tt);
                        dtruth[i * c + half + n] = outer * (dm_dt_im / denom - cos * t_im / tt);
                    }
                }
                send(*pred, dpred);
                send(*truth, dtruth);
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

struct CosineTerms {
    re: f64,
    im: f64,
    modulus: f64,
    p_norm: f64,
    t_norm: f64,
}

fn cosine_terms(p: &[f64], t: &[f64]) -> Option<CosineTerms> {
    let half = p.len() / 2;
    let (mut re, mut im, mut pp, mut tt) = (0.0, 0.0, 0.0, 0.0);
    for n in 0..half {
        let (p_re, p_im, t_re, t_im) = (p[n], p[half + n], t[n], t[half + n]);
        re += t_re * p_re + t_im * p_im;
        im += t_re * p_im - t_im * p_re;
        pp += p_re * p_re + p_im * p_im;
        tt += t_re * t_re + t_im * t_im;
    }
    if pp == 0.0 || tt == 0.0 {
        return None;
    }
    Some(CosineTerms { re, im, modulus: re.hypot(im), p_norm: pp.sqrt(), t_norm: tt.sqrt() })
}
