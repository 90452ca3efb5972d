//! Deterministic RNG streams.
//!
//! Every stochastic component takes an explicit stream derived from a master
//! seed and a small set of integer tags, so runs are reproducible bit-for-bit
//! regardless of evaluation order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes a 64-bit value (splitmix64 finalizer).
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// A ChaCha stream derived from `seed` and the given tags.
///
/// Distinct tag tuples give statistically independent streams; identical
/// tuples give identical streams.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = mix(seed ^ 0x5ce1_ab1e_c0ff_ee00);
    for &t in tags {
        state = mix(state ^ mix(t));
    }
    let mut key = [0u8; 32];
    let mut s = state;
    for chunk in key.chunks_exact_mut(8) {
        s = mix(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Convenience stream for per-pixel work: split deterministically from
/// `(seed, pixel index)`.
pub fn pixel_stream(seed: u64, pixel_index: u64) -> ChaCha8Rng {
    stream(seed, &[0x70_69_78, pixel_index])
}
