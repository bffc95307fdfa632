//! Deterministic random substreams.
//!
//! Every stochastic component draws from a ChaCha stream whose seed is a
//! counter-based mix of a master seed, a domain tag and an index, so any
//! single stream can be regenerated without replaying the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Domain tags keep substreams of different subsystems apart.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Channel = 0x4348_414e,
    Split = 0x5350_4c54,
    Init = 0x494e_4954,
    Shuffle = 0x5348_5546,
    Augment = 0x4155_474d,
    Surgery = 0x5355_5247,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `(master, domain, index)` into a 64-bit stream key.
pub fn mix(master: u64, domain: Domain, index: u64) -> u64 {
    let a = splitmix64(master ^ (domain as u64).rotate_left(32));
    splitmix64(a ^ splitmix64(index.wrapping_add(0x632b_e59b_d9b4_e019)))
}

pub fn substream(master: u64, domain: Domain, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(mix(master, domain, index))
}
