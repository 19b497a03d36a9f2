//! Seeded RNG substreams.
//!
//! Every random decision in the engine draws from a `ChaCha8Rng` derived from
//! a root seed plus a stream label, so that independent pipeline stages
//! (shuffling, masking, sentence selection, synthesis) never share a stream
//! and stay reproducible regardless of evaluation order or thread scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates nearby seed values.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a root seed, a stream label, and an index.
pub fn derive_seed(root: u64, label: &str, index: u64) -> u64 {
    let mut h = mix(root);
    for b in label.as_bytes() {
        h = mix(h ^ u64::from(*b));
    }
    mix(h ^ index)
}

/// A seeded generator for the given (root, label, index) substream.
pub fn stream(root: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label, index))
}
