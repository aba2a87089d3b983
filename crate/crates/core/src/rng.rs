//! Seed plumbing. Every stochastic routine takes an explicit `u64` seed and
//! builds its own generator, so results never depend on call order elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child seed from a parent seed and a stream label
/// (splitmix64 finalizer over the mixed inputs).
pub fn derive_seed(parent: u64, stream: &str) -> u64 {
    let mut h = parent ^ 0x9e37_79b9_7f4a_7c15;
    for b in stream.bytes() {
        h = mix(h ^ u64::from(b));
    }
    mix(h)
}

pub fn derive_seed_n(parent: u64, index: u64) -> u64 {
    mix(mix(parent ^ 0xd1b5_4a32_d192_ed03).wrapping_add(index))
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
