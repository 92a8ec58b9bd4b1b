//! Seeded randomness. Every stochastic choice in the toolkit draws from a
//! ChaCha8 stream derived from the run seed and a fixed stream label, so a run
//! is bit-reproducible regardless of evaluation order elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Independent stream for `(seed, label)`.
pub fn stream(seed: u64, label: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label);
    rng
}

pub mod streams {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const EMBEDDINGS: u64 = 4;
    pub const BENCH: u64 = 5;
}
