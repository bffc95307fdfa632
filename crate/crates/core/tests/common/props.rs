use evcsi::augment::{cyclic_shift, flip_antenna, flip_subband, noise_inject, random_shuffle, rotate};
use evcsi::channelgen::CsiSample;
use evcsi::metrics::sgcs;
use evcsi::quantizer::{dequantize_uniform, pack_bits, quantize_uniform, unpack_bits, Bitstream};
use evcsi::rng::{substream, Domain};
use evcsi::training::{lr_at_epoch, TrainConfig};
use num_complex::Complex64;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::Rng as _;
use rand_distr::StandardNormal;

pub const CASES: u32 = 200;

type Outcome = std::result::Result<(), TestCaseError>;

pub fn sample(seed: u64, n_tx: usize, n_sb: usize) -> CsiSample {
    let mut rng = substream(seed, Domain::Channel, 0);
    let data = (0..n_tx * n_sb)
        .map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
        .collect();
    let mut s = CsiSample::new(n_tx, n_sb, data).unwrap();
    s.normalize_columns().unwrap();
    s
}

pub fn dims() -> impl Strategy<Value = (u64, usize, usize)> {
    (any::<u64>(), 1usize..=8, 1usize..=12)
}

pub fn sgcs_ignores_per_subband_phase((seed, nt, nsb): (u64, usize, usize), phase_seed: u64) -> Outcome {
    let (w, p) = (sample(seed, nt, nsb), sample(seed ^ 1, nt, nsb));
    let mut rng = substream(phase_seed, Domain::Augment, 0);
    let thetas: Vec<f64> = (0..nsb).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let base = sgcs(&[&w], &[&p]).unwrap();
    prop_assert!((sgcs(&[&w], &[rotate(&p, &thetas).unwrap()]).unwrap() - base).abs() < 1e-12);
    prop_assert!((sgcs(&[rotate(&w, &thetas).unwrap()], &[&p]).unwrap() - base).abs() < 1e-12);
    Ok(())
}

pub fn sgcs_ignores_joint_permutations((seed, nt, nsb): (u64, usize, usize), perm_seed: u64) -> Outcome {
    let truth: Vec<CsiSample> = (0..4).map(|i| sample(seed.wrapping_add(i), nt, nsb)).collect();
    let pred: Vec<CsiSample> = (0..4).map(|i| sample(seed.wrapping_add(100 + i), nt, nsb)).collect();
    let base = sgcs(&truth, &pred).unwrap();
    // Subband permutation applied to truth and prediction alike.
    let mut rng = substream(perm_seed, Domain::Augment, 1);
    let (t0, perm) = random_shuffle(&truth[0], &mut rng);
    let cols = |s: &CsiSample| CsiSample::from_columns(perm.iter().map(|&k| s.column(k).to_vec()).collect()).unwrap();
    prop_assert_eq!(&t0, &cols(&truth[0]));
    let t2: Vec<CsiSample> = truth.iter().map(cols).collect();
    let p2: Vec<CsiSample> = pred.iter().map(cols).collect();
    prop_assert!((sgcs(&t2, &p2).unwrap() - base).abs() < 1e-12);
    // Sample order.
    let order = [2usize, 0, 3, 1];
    let t3: Vec<&CsiSample> = order.iter().map(|&i| &truth[i]).collect();
    let p3: Vec<&CsiSample> = order.iter().map(|&i| &pred[i]).collect();
    prop_assert!((sgcs(&t3, &p3).unwrap() - base).abs() < 1e-12);
    Ok(())
}

pub fn quantizer_round_trip_bound(v: Vec<f64>, bits: u32) -> Outcome {
    let q = quantize_uniform(&v, bits).unwrap();
    prop_assert_eq!(q.out_of_range, 0);
    let back = dequantize_uniform(&q.indices, bits).unwrap();
    let bound = 2f64.powi(-(bits as i32 + 1));
    for (a, b) in v.iter().zip(&back) {
        prop_assert!((a - b).abs() <= bound * (1.0 + 1e-12));
    }
    Ok(())
}

pub fn pack_unpack_bijection(bits: u32, raw: Vec<u8>) -> Outcome {
    let idx: Vec<u8> = raw.iter().map(|&r| (u32::from(r) % (1u32 << bits)) as u8).collect();
    let s = pack_bits(&idx, bits).unwrap();
    prop_assert_eq!(unpack_bits(&s, bits).unwrap(), idx.clone());
    let again = Bitstream::from_bytes(&s.to_bytes(), s.len()).unwrap();
    prop_assert_eq!(pack_bits(&unpack_bits(&again, bits).unwrap(), bits).unwrap(), s);
    Ok(())
}

pub fn flips_are_involutions((seed, nt, nsb): (u64, usize, usize)) -> Outcome {
    let w = sample(seed, nt, nsb);
    prop_assert_eq!(flip_subband(&flip_subband(&w)), w.clone());
    prop_assert_eq!(flip_antenna(&flip_antenna(&w)), w);
    Ok(())
}

pub fn cyclic_shifts_form_a_group((seed, nt, nsb): (u64, usize, usize), a: usize, b: usize) -> Outcome {
    let w = sample(seed, nt, nsb);
    let (a, b) = (a % nsb, b % nsb);
    let composed = cyclic_shift(&cyclic_shift(&w, a).unwrap(), b).unwrap();
    prop_assert_eq!(composed, cyclic_shift(&w, (a + b) % nsb).unwrap());
    prop_assert_eq!(cyclic_shift(&w, 0).unwrap(), w.clone());
    prop_assert!(cyclic_shift(&w, nsb).is_err());
    Ok(())
}

pub fn rotation_is_sgcs_neutral((seed, nt, nsb): (u64, usize, usize), theta: f64, per_subband: bool) -> Outcome {
    let w = sample(seed, nt, nsb);
    let thetas: Vec<f64> = if per_subband { (0..nsb).map(|k| theta * (k as f64 + 0.5)).collect() } else { vec![theta] };
    let r = rotate(&w, &thetas).unwrap();
    prop_assert!(r.is_unit_norm(1e-12));
    prop_assert!((sgcs(&[&w], &[&r]).unwrap() - 1.0).abs() < 1e-12);
    Ok(())
}

pub fn zero_noise_is_identity((seed, nt, nsb): (u64, usize, usize), sigma: f64) -> Outcome {
    let w = sample(seed, nt, nsb);
    let mut rng = substream(seed, Domain::Augment, 7);
    prop_assert_eq!(noise_inject(&w, 0.0, sigma, &mut rng), w);
    Ok(())
}

pub fn schedule_endpoints_are_exact(warmup: usize, decay: usize, tail: usize, lr_max: f64, ratio: f64) -> Outcome {
    let cfg = TrainConfig {
        epochs: warmup + decay + tail,
        warmup_epochs: warmup,
        decay_epochs: decay,
        lr_max,
        lr_min: lr_max * ratio,
        ..TrainConfig::default()
    };
    if warmup > 0 {
        prop_assert_eq!(lr_at_epoch(warmup, &cfg).unwrap(), cfg.lr_max);
    }
    prop_assert_eq!(lr_at_epoch(warmup + decay, &cfg).unwrap(), cfg.lr_min);
    let lrs: Vec<f64> = (1..=cfg.epochs).map(|t| lr_at_epoch(t, &cfg).unwrap()).collect();
    prop_assert!(lrs.iter().all(|&a| a > 0.0));
    prop_assert!(lrs[..warmup].windows(2).all(|p| p[0] <= p[1]));
    prop_assert!(lrs[warmup.saturating_sub(1)..warmup + decay].windows(2).all(|p| p[0] >= p[1]));
    Ok(())
}

fn run<S: Strategy>(strategy: S, test: impl Fn(S::Value) -> Outcome) -> std::result::Result<(), String> {
    let mut runner = TestRunner::new(Config { cases: CASES, failure_persistence: None, ..Config::default() });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

/// Runs every property outside the `proptest!` harness.
pub fn run_all() -> Vec<(&'static str, std::result::Result<(), String>)> {
    vec![
        ("sgcs_phase", run((dims(), any::<u64>()), |(d, s)| sgcs_ignores_per_subband_phase(d, s))),
        ("sgcs_permutation", run((dims(), any::<u64>()), |(d, s)| sgcs_ignores_joint_permutations(d, s))),
        (
            "quantizer_bound",
            run((prop::collection::vec(0.0f64..=1.0, 1..100), 1u32..=8), |(v, b)| quantizer_round_trip_bound(v, b)),
        ),
        (
            "pack_unpack",
            run((1u32..=8, prop::collection::vec(any::<u8>(), 0..64)), |(b, r)| pack_unpack_bijection(b, r)),
        ),
        ("flip_involution", run(dims(), flips_are_involutions)),
        ("cyclic_group", run((dims(), 0usize..12, 0usize..12), |(d, a, b)| cyclic_shifts_form_a_group(d, a, b))),
        (
            "rotation_neutral",
            run((dims(), -10.0f64..10.0, any::<bool>()), |(d, t, p)| rotation_is_sgcs_neutral(d, t, p)),
        ),
        ("zero_noise", run((dims(), 0.0f64..3.0), |(d, s)| zero_noise_is_identity(d, s))),
        (
            "schedule_endpoints",
            run((0usize..50, 1usize..400, 0usize..20, 1e-5f64..1e-1, 1e-4f64..=1.0), |(w, d, t, m, r)| {
                schedule_endpoints_are_exact(w, d, t, m, r)
            }),
        ),
    ]
}
