//! Counter-based random streams.
//!
//! Every stream is keyed by `(seed, domain, a, b)` so that a draw never
//! depends on how many other draws happened first or on which thread ran.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream domains used across the crate.
pub mod domain {
    pub const LATENT: u64 = 1;
    pub const COMPARISON: u64 = 2;
    pub const SHUFFLE: u64 = 3;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, domain: u64, a: u64, b: u64) -> StreamRng {
    let mut key = [0u8; 32];
    let mut state = splitmix64(seed);
    for (chunk, word) in key.chunks_exact_mut(8).zip([domain, a, b, 0x5EED]) {
        state = splitmix64(state ^ word);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
