//! Deterministic random-number plumbing.
//!
//! Every random draw in the crate flows through a ChaCha8 generator seeded
//! here, so a run is a pure function of its configured seed. Independent
//! concerns (parameter init, scene generation, augmentation, shuffling…)
//! derive their own streams from the base seed with [`derive`], which keeps
//! them decoupled: consuming more draws in one stream never shifts another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A generator seeded directly with `seed`.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A seed for an independent, named sub-stream.
///
/// `purpose` partitions streams by role and `index` by position within the
/// role (epoch number, sample number…). The mix is splitmix64 over the
/// xor-combined inputs — cheap, stable across platforms, and documented here
/// because checkpoint resume depends on replaying the exact same streams.
pub fn derive(base: u64, purpose: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in purpose.as_bytes() {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(base ^ h.rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// A generator for an independent, named sub-stream.
pub fn derived(base: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    seeded(derive(base, purpose, index))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
