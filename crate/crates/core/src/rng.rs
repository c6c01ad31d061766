//! Keyed random streams. Every stochastic step derives its generator from
//! `(seed, key...)` so results do not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// ChaCha8 stream keyed by `seed` and an arbitrary tuple of indices.
pub fn keyed(seed: u64, key: &[u64]) -> ChaCha8Rng {
    let mut state = mix(seed.wrapping_add(GOLDEN));
    for &k in key {
        state = mix(state ^ mix(k.wrapping_add(GOLDEN)));
    }
    let mut bytes = [0u8; 32];
    for (i, chunk) in bytes.chunks_exact_mut(8).enumerate() {
        state = mix(state.wrapping_add(GOLDEN.wrapping_mul(i as u64 + 1)));
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// Stream tags, so distinct subsystems never share a stream.
pub mod tag {
    pub const SUITE: u64 = 1;
    pub const FINETUNE: u64 = 2;
    pub const DARE: u64 = 3;
    pub const KMEANS: u64 = 4;
    pub const BATCH: u64 = 5;
    pub const SWEEP: u64 = 6;
}
