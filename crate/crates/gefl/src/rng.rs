//! Named deterministic RNG streams.
//!
//! Every source of randomness in the simulator is a ChaCha stream derived
//! from the experiment seed plus a list of integer tags (purpose, round,
//! client id, ...). Two streams with different tag lists are statistically
//! independent, and a stream's output depends only on (seed, tags), never
//! on call order elsewhere in the program.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Stream purpose tags. Kept explicit so collisions are impossible by
/// construction rather than by convention.
pub mod tag {
    pub const DATASET: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const INIT: u64 = 4;
    pub const KA: u64 = 5;
    pub const TN: u64 = 6;
    pub const FE: u64 = 7;
    pub const SAMPLE: u64 = 8;
    pub const EVAL: u64 = 9;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derives a stream keyed by `(seed, tags)`.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    let mut acc = splitmix64(seed);
    for (i, chunk) in key.chunks_mut(8).enumerate() {
        let mut h = acc ^ splitmix64(i as u64 + 0x5bf0_3635);
        for &t in tags {
            h = splitmix64(h ^ splitmix64(t));
        }
        chunk.copy_from_slice(&h.to_le_bytes());
        acc = splitmix64(acc);
    }
    ChaCha12Rng::from_seed(key)
}
