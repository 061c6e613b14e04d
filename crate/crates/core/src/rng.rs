//! Deterministic RNG derivation.
//!
//! Every stochastic site derives its own stream from `(master seed, tags)`
//! so results are independent of execution order and thread scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates structured tag tuples.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent RNG stream from a master seed and a tag path,
/// e.g. `derive_rng(seed, &[TAG_DEVICE, round, device_id])`.
pub fn derive_rng(master: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = mix(master);
    for &t in tags {
        state = mix(state ^ mix(t));
    }
    ChaCha8Rng::seed_from_u64(state)
}

/// Tag namespaces for the simulation.
pub const TAG_INIT: u64 = 1;
pub const TAG_SAMPLING: u64 = 2;
pub const TAG_DEVICE: u64 = 3;
pub const TAG_PRETRAIN: u64 = 4;
pub const TAG_CORPUS: u64 = 5;
