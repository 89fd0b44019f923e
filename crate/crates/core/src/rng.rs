//! Seeded RNG construction and deterministic stream derivation.
//!
//! Every randomized stage takes an explicit 64-bit seed; per-item RNGs are
//! derived by mixing the seed with a stream label and an index, so parallel
//! and serial execution consume identical random streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// SplitMix64 finalizer; good avalanche, cheap.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// RNG for a top-level stage.
pub fn rng_from_seed(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Independent RNG for item `index` of the stream named by `stream`.
pub fn derive_rng(seed: u64, stream: u64, index: u64) -> ChaCha12Rng {
    let mixed = mix(seed ^ mix(stream) ^ mix(index.wrapping_mul(0xA24BAED4963EE407)));
    ChaCha12Rng::seed_from_u64(mixed)
}
