//! Seeded random streams. Every stochastic step draws from a ChaCha8 stream
//! selected by `(seed, stream id)`, so independent consumers of one seed never
//! share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const INIT: u64 = 1;
pub(crate) const HEAD: u64 = 2;
pub(crate) const SHUFFLE: u64 = 3;
pub(crate) const MEANS: u64 = 4;
pub(crate) const SHIFT: u64 = 5;
pub(crate) const SPLIT: u64 = 6;
pub(crate) const HOLDOUT: u64 = 7;
pub(crate) const RANDOM_VECTOR: u64 = 8;
pub(crate) const SAMPLES: u64 = 64;

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
