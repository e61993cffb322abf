//! Seeded random streams. Every stochastic step derives its generator from
//! the command seed plus a named stream, so adding randomness to one step
//! never shifts the numbers another step sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    WeightInit = 1,
    Shuffle = 2,
    Clustering = 3,
    SuiteSampling = 4,
    AttackStart = 5,
    Dataset = 6,
    PairSampling = 7,
    Test = 99,
}

impl Stream {
    pub fn rng(self, seed: u64) -> Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(self as u64);
        rng
    }

    /// A stream further split by an index (a class, a sample, a repeat).
    pub fn rng_indexed(self, seed: u64, index: u64) -> Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(self as u64);
        rng
    }
}
