#![allow(dead_code)]

pub mod eigen;
pub mod props;

use evcsi::channelgen::{build_dataset, ChannelParams};
use evcsi::model::{decoder_forward, encoder_forward, forward, init_model, input_tensor, Bottleneck, Bound, ModelConfig};
use evcsi::ndiff::{grad_check, grad_check_against, GradCheckReport, Graph, Tensor, Var};
use evcsi::quantizer::{dequantize_uniform, quantize_uniform};
use evcsi::rng::{substream, Domain};
use evcsi::training::{loss_cosine, loss_mse, loss_quant_comp, loss_scoring, QuantBase};
use evcsi::Result;
use rand::Rng as _;

pub const STEP: f64 = 1e-5;
pub const MAX_REL_ERROR: f64 = 1e-4;

type Scalar = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub points: Vec<Tensor>,
    pub f: Scalar,
    /// Function whose finite differences the gradient of `f` must match.
    pub oracle: Option<Scalar>,
}

impl Case {
    pub fn check(&self) -> GradCheckReport {
        let r = match &self.oracle {
            Some(o) => grad_check_against(&self.f, o, &self.points, STEP),
            None => grad_check(&self.f, &self.points, STEP),
        };
        r.unwrap_or_else(|e| panic!("{}: {e}", self.name))
    }
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = substream(seed, Domain::Init, 999);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `sum(x * c)` with fixed random `c`, so every output entry contributes.
pub fn weighted(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let c = g.constant(uniform(g.shape(x), -1.0, 1.0, seed ^ 0xabc));
    let p = g.mul(x, c)?;
    g.sum(p)
}

fn case(name: &'static str, points: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> Case {
    Case { name, points, f: Box::new(f), oracle: None }
}

fn u(shape: &[usize], seed: u64) -> Tensor {
    uniform(shape, -1.0, 1.0, seed)
}

/// Every differentiable graph operation, each reduced to a scalar.
pub fn primitive_cases() -> Vec<Case> {
    let mut cases = vec![
        case("matmul", vec![u(&[3, 4], 1), u(&[4, 5], 2)], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted(g, y, 1)
        }),
        case("add", vec![u(&[3, 4], 3), u(&[3, 4], 4)], |g, v| {
            let y = g.add(v[0], v[1])?;
            weighted(g, y, 2)
        }),
        case("sub", vec![u(&[3, 4], 5), u(&[3, 4], 6)], |g, v| {
            let y = g.sub(v[0], v[1])?;
            weighted(g, y, 3)
        }),
        case("mul", vec![u(&[3, 4], 7), u(&[3, 4], 8)], |g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted(g, y, 4)
        }),
        case("div", vec![u(&[3, 4], 9), uniform(&[3, 4], 0.5, 2.0, 10)], |g, v| {
            let y = g.div(v[0], v[1])?;
            weighted(g, y, 5)
        }),
        case("scale", vec![u(&[2, 3], 11)], |g, v| {
            let y = g.scale(v[0], -2.5)?;
            weighted(g, y, 6)
        }),
        case("add_scalar", vec![u(&[2, 3], 12)], |g, v| {
            let y = g.add_scalar(v[0], 0.7)?;
            let y = g.mul(y, y)?;
            weighted(g, y, 7)
        }),
        case("add_row_bias", vec![u(&[3, 4], 13), u(&[4], 14)], |g, v| {
            let y = g.add_row_bias(v[0], v[1])?;
            weighted(g, y, 8)
        }),
        case("linear", vec![u(&[3, 4], 15), u(&[4, 5], 16), u(&[5], 17)], |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            weighted(g, y, 9)
        }),
        case("reshape", vec![u(&[3, 4], 18)], |g, v| {
            let y = g.reshape(v[0], vec![2, 6])?;
            let y = g.mul(y, y)?;
            weighted(g, y, 10)
        }),
        case("flatten", vec![u(&[3, 4], 19)], |g, v| {
            let y = g.flatten(v[0])?;
            let y = g.mul(y, y)?;
            weighted(g, y, 11)
        }),
        case("transpose", vec![u(&[3, 4], 20), u(&[3, 2], 21)], |g, v| {
            let t = g.transpose(v[0])?;
            let y = g.matmul(t, v[1])?;
            weighted(g, y, 12)
        }),
        case("concat_rows", vec![u(&[2, 3], 22), u(&[4, 3], 23)], |g, v| {
            let y = g.concat(&[v[0], v[1], v[0]], 0)?;
            let y = g.mul(y, y)?;
            weighted(g, y, 13)
        }),
        case("concat_cols", vec![u(&[3, 2], 24), u(&[3, 4], 25)], |g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            let y = g.mul(y, y)?;
            weighted(g, y, 14)
        }),
        case("softmax", vec![uniform(&[3, 5], -2.0, 2.0, 26)], |g, v| {
            let y = g.softmax(v[0])?;
            weighted(g, y, 15)
        }),
        case("sum", vec![u(&[3, 4], 27)], |g, v| {
            let y = g.mul(v[0], v[0])?;
            g.sum(y)
        }),
        case("mean", vec![u(&[3, 4], 28)], |g, v| {
            let y = g.mul(v[0], v[0])?;
            g.mean(y)
        }),
        case("gelu", vec![uniform(&[3, 4], -3.0, 3.0, 29)], |g, v| {
            let y = g.gelu(v[0])?;
            weighted(g, y, 16)
        }),
        case("sigmoid", vec![uniform(&[3, 4], -4.0, 4.0, 30)], |g, v| {
            let y = g.sigmoid(v[0])?;
            weighted(g, y, 17)
        }),
        case("layer_norm", vec![u(&[4, 6], 31), uniform(&[6], 0.5, 1.5, 32), u(&[6], 33)], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted(g, y, 18)
        }),
        case("attention", vec![u(&[6, 4], 34), u(&[6, 4], 35), u(&[6, 4], 36)], |g, v| {
            let y = g.attention(v[0], v[1], v[2], 3, 2)?;
            weighted(g, y, 19)
        }),
        case("row_normalize", vec![u(&[4, 6], 37)], |g, v| {
            let y = g.row_normalize(v[0])?;
            weighted(g, y, 20)
        }),
        case("row_cosine", vec![u(&[4, 6], 38), u(&[4, 6], 39)], |g, v| {
            let y = g.row_cosine(v[0], v[1], false)?;
            weighted(g, y, 21)
        }),
        case("row_cosine_squared", vec![u(&[4, 6], 40), u(&[4, 6], 41)], |g, v| {
            let y = g.row_cosine(v[0], v[1], true)?;
            weighted(g, y, 22)
        }),
        case("loss_cosine", vec![u(&[4, 6], 42), u(&[4, 6], 43)], |g, v| loss_cosine(g, v[0], v[1])),
        case("loss_scoring", vec![u(&[4, 6], 44), u(&[4, 6], 45)], |g, v| loss_scoring(g, v[0], v[1])),
        case("loss_mse", vec![u(&[4, 6], 46), u(&[4, 6], 47)], |g, v| loss_mse(g, v[0], v[1])),
        case("loss_quant_comp_mse", vec![uniform(&[2, 5], 0.0, 1.0, 48)], |g, v| {
            loss_quant_comp(g, v[0], &uniform(&[2, 5], 0.0, 1.0, 49), QuantBase::Mse)
        }),
        case("loss_quant_comp_nmse", vec![uniform(&[2, 5], 0.0, 1.0, 50)], |g, v| {
            loss_quant_comp(g, v[0], &uniform(&[2, 5], 0.0, 1.0, 51), QuantBase::Nmse)
        }),
    ];

    // Straight-through: the forward value is replaced, the gradient is the
    // identity, so the oracle is `x + frozen residual`.
    let x = uniform(&[3, 4], 0.0, 1.0, 52);
    let q = quantize_uniform(x.data(), 2).unwrap();
    let deq = Tensor::new(vec![3, 4], dequantize_uniform(&q.indices, 2).unwrap()).unwrap();
    let residual: Vec<f64> = deq.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
    let fwd = deq.clone();
    cases.push(Case {
        name: "straight_through",
        points: vec![x],
        f: Box::new(move |g, v| {
            let y = g.straight_through(v[0], fwd.clone())?;
            let y = g.mul(y, y)?;
            weighted(g, y, 23)
        }),
        oracle: Some(Box::new(move |g, v| {
            let r = g.constant(Tensor::new(vec![3, 4], residual.clone())?);
            let y = g.add(v[0], r)?;
            let y = g.mul(y, y)?;
            weighted(g, y, 23)
        })),
    });
    cases
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig { n_e: 8, n_b: 1, n_head: 2, k_h: 2, bits_total: 8, bits_per_symbol: 2, n_tx: 2, n_subband: 3 }
}

fn tiny_input(cfg: &ModelConfig) -> Tensor {
    let params = ChannelParams { n_tx: cfg.n_tx, n_subband: cfg.n_subband, ..ChannelParams::default() };
    let data = build_dataset(&params, 2, 17).unwrap();
    input_tensor(data.samples(), cfg).unwrap()
}

/// Full encoder, full encoder+decoder with an identity bottleneck, and the
/// quantized model checked against its frozen-residual oracle.
pub fn model_cases() -> Vec<Case> {
    let cfg = tiny_model_config();
    let weights = init_model(&cfg, 5).unwrap();
    let points: Vec<Tensor> = weights.tensors().cloned().collect();
    let input = tiny_input(&cfg);

    let (w1, in1) = (weights.clone(), input.clone());
    let encoder = Case {
        name: "encoder",
        points: points.clone(),
        f: Box::new(move |g, v| {
            let bound = Bound::from_vars(&w1, v)?;
            let x = g.constant(in1.clone());
            let s = encoder_forward(g, &bound, &cfg, x)?;
            weighted(g, s, 31)
        }),
        oracle: None,
    };

    let (w2, in2) = (weights.clone(), input.clone());
    let identity = Case {
        name: "encoder_decoder_identity",
        points: points.clone(),
        f: Box::new(move |g, v| {
            let bound = Bound::from_vars(&w2, v)?;
            let x = g.constant(in2.clone());
            let out = forward(g, &bound, &cfg, x, &Bottleneck::Identity)?;
            loss_cosine(g, out.reconstruction, x)
        }),
        oracle: None,
    };

    // Residual of the quantizer at the base point, frozen for the oracle.
    let residual = {
        let mut g = Graph::new();
        let bound = Bound::constants(&mut g, &weights);
        let x = g.constant(input.clone());
        let s = encoder_forward(&mut g, &bound, &cfg, x).unwrap();
        let v = g.value(s).data().to_vec();
        let q = quantize_uniform(&v, cfg.bits_per_symbol).unwrap();
        let deq = dequantize_uniform(&q.indices, cfg.bits_per_symbol).unwrap();
        deq.iter().zip(&v).map(|(a, b)| a - b).collect::<Vec<f64>>()
    };
    let (w3, in3) = (weights.clone(), input.clone());
    let (w4, in4) = (weights.clone(), input.clone());
    let quantized = Case {
        name: "encoder_decoder_quantized",
        points: points.clone(),
        f: Box::new(move |g, v| {
            let bound = Bound::from_vars(&w3, v)?;
            let x = g.constant(in3.clone());
            let out = forward(g, &bound, &cfg, x, &Bottleneck::Quantize)?;
            loss_cosine(g, out.reconstruction, x)
        }),
        oracle: Some(Box::new(move |g, v| {
            let bound = Bound::from_vars(&w4, v)?;
            let x = g.constant(in4.clone());
            let out = forward(g, &bound, &cfg, x, &Bottleneck::Shift(residual.clone()))?;
            loss_cosine(g, out.reconstruction, x)
        })),
    };

    let (w5, in5) = (weights, input);
    let decoder = Case {
        name: "decoder_scoring",
        points,
        f: Box::new(move |g, v| {
            let bound = Bound::from_vars(&w5, v)?;
            let z = g.constant(uniform(&[2, cfg.symbols()], 0.0, 1.0, 77));
            let rec = decoder_forward(g, &bound, &cfg, z)?;
            let truth = g.constant(in5.clone());
            loss_scoring(g, rec, truth)
        }),
        oracle: None,
    };
    vec![encoder, identity, quantized, decoder]
}
