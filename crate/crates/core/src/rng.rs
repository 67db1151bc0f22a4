//! Seed derivation. Every Monte Carlo stream in the crate is a ChaCha8 generator
//! keyed by a master seed mixed with a path of integer tags, so a stream depends
//! only on its position in the experiment grid and never on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Samples generated per independent substream.
pub const CHUNK: usize = 1024;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a sequence of tags into a new 64-bit seed.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ 0x6D52_415F_4C41_4221);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t.wrapping_add(0xA076_1D64_78BD_642F)));
    }
    h
}

pub fn stream(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tags))
}
