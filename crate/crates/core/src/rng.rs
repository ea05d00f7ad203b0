//! Seeded random streams.
//!
//! Every consumer derives its own ChaCha stream from the run seed and a label,
//! so adding a draw in one place never shifts the numbers seen elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type AtlasRng = ChaCha8Rng;

pub fn stream(seed: u64, label: &str) -> AtlasRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(label.as_bytes()));
    rng
}

/// Stream for the `index`-th item of a labelled family.
pub fn indexed(seed: u64, label: &str, index: u64) -> AtlasRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(fnv1a(label.as_bytes()));
    rng
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
