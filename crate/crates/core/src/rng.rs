//! Seed derivation for reproducible, order-independent random streams.
//!
//! Every stochastic component (sampler, batch shuffling, data generation,
//! k-means initialisation) draws from its own ChaCha stream keyed by the
//! experiment seed plus a tuple of tags, so adding or reordering work never
//! perturbs an unrelated stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with a list of tags into a new 64-bit seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_from(base: u64, tags: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(base, tags))
}

/// Stream tags, kept distinct so that streams never collide.
pub(crate) mod tag {
    pub const SAMPLER: u64 = 1;
    pub const BATCHES: u64 = 2;
    pub const DATA: u64 = 3;
    pub const KMEANS: u64 = 4;
    pub const MODEL_INIT: u64 = 5;
    pub const CLUSTERING: u64 = 6;
}
