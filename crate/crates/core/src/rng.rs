//! Seeding helpers. All randomness flows through ChaCha8 streams whose seeds
//! are derived with SplitMix64, so content never depends on iteration order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer applied to `seed ⊕ golden·(index+1)`.
pub fn mix(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream keyed by a seed and a textual purpose, e.g. `("init", "expert.0")`.
pub fn keyed_stream(seed: u64, key: &str) -> ChaCha8Rng {
    let mut h = seed;
    for (i, b) in key.bytes().enumerate() {
        h = mix(h, ((i as u64) << 8) | b as u64);
    }
    stream(h)
}
