//! Seeded random streams.
//!
//! Every stage draws from its own named stream derived from a single run
//! seed, so stages stay reproducible independently of each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(name: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Derive a child seed from a parent seed, a stream name and an index.
pub fn derive_seed(seed: u64, name: &str, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ fnv1a(name)).wrapping_add(splitmix64(index)))
}

/// Named sub-stream of `seed`.
pub fn stream(seed: u64, name: &str) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, name, 0))
}

/// Indexed sub-stream, e.g. one per shape or per epoch.
pub fn substream(seed: u64, name: &str, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, name, index))
}
