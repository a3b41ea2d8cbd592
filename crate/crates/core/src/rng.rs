//! Seeded random streams.
//!
//! Every simulated path draws from its own ChaCha stream keyed by
//! `(seed, path_index)`, so results never depend on how paths are scheduled
//! across worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type PathRng = ChaCha8Rng;

pub fn path_rng(seed: u64, path_index: u64) -> PathRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    rng
}

#[inline]
pub fn standard_normal(rng: &mut PathRng) -> f64 {
    StandardNormal.sample(rng)
}
