//! Seed derivation helpers.
//!
//! Every random decision in the engine flows from one user-visible `u64`
//! seed through these mixers, so independent streams (per-parameter init,
//! per-epoch shuffles, per-item dropout, per-variate synth phases) never
//! alias and runs replay bit-for-bit.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche for cheap stream separation.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fold `parts` into `base`, one splitmix round per part.
pub fn mix(base: u64, parts: &[u64]) -> u64 {
    let mut s = splitmix(base);
    for &p in parts {
        s = splitmix(s ^ p.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    s
}

/// FNV-1a over the bytes of a name; used to give each parameter tensor its
/// own init stream keyed by name, independent of construction order.
pub fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic generator for the stream identified by `(base, parts)`.
pub fn stream(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(base, parts))
}

/// Stream tags, so call sites can't collide by accident.
pub mod tag {
    pub const INIT: u64 = 0x01;
    pub const SHUFFLE: u64 = 0x02;
    pub const DROPOUT: u64 = 0x03;
    pub const SYNTH_PHASE: u64 = 0x04;
    pub const SYNTH_NOISE: u64 = 0x05;
}
