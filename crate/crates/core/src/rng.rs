//! Named random sub-streams derived from a single run seed.
//!
//! Every consumer of randomness (weight init, data order, synthetic data)
//! draws from its own ChaCha stream so that changing one stage never shifts
//! the numbers another stage sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Generator for the sub-stream `name` of `seed`.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

/// Generator for the `index`-th member of sub-stream `name` (e.g. one per epoch).
pub fn substream_indexed(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut key = name.as_bytes().to_vec();
    key.push(0);
    key.extend_from_slice(&index.to_le_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(&key));
    rng
}
