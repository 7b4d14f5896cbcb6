//! Counter-based random streams.
//!
//! Every simulated path owns a ChaCha stream addressed by `(seed, stream)`, so
//! the draws for path `i` do not depend on how paths are partitioned across
//! workers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Independent stream for a `(seed, stream id)` pair.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Stream id for path `path` of sub-population `k` within a given purpose.
/// Purposes keep e.g. the principal's samples independent of the population run.
pub fn stream_id(purpose: u8, k: usize, path: usize) -> u64 {
    ((purpose as u64) << 56) | ((k as u64 & 0xff) << 48) | (path as u64 & 0xffff_ffff_ffff)
}

pub mod purpose {
    pub const MEAN_FIELD: u8 = 1;
    pub const POPULATION: u8 = 2;
    pub const PRINCIPAL: u8 = 3;
    pub const DEVIATION: u8 = 4;
}

#[inline]
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}
