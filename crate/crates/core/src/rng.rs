//! Seeded random streams.
//!
//! Sequential updates draw from [`ChaCha8Rng`] streams derived from a master
//! seed. Site-level draws inside a chequerboard block use [`KeyedStream`],
//! a counter-based generator keyed by `(iteration, site)`, so the output does
//! not depend on how sites are scheduled across workers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed from a master seed and a stream tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix(splitmix(seed) ^ splitmix(tag.wrapping_mul(GOLDEN)))
}

/// A ChaCha stream for `(seed, tag)`.
pub fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

/// Counter-based uniform draws keyed by `(iteration, site)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyedStream {
    key: u64,
}

impl KeyedStream {
    pub fn new(seed: u64, tag: u64) -> Self {
        Self {
            key: derive_seed(seed, tag),
        }
    }

    /// Uniform draw in `[0, 1)` with 53 bits of resolution.
    #[inline]
    pub fn uniform(&self, iteration: u64, site: u64) -> f64 {
        let h = splitmix(splitmix(self.key ^ iteration.wrapping_mul(GOLDEN)) ^ site);
        (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Stream tags used by the samplers. Kept in one place so no two consumers
/// share a stream by accident.
pub mod tags {
    pub const LABELS: u64 = 1;
    pub const MIXTURE: u64 = 2;
    pub const BETA: u64 = 3;
    pub const CALIBRATION: u64 = 0x100;
    pub const PHANTOM_NOISE: u64 = 10;
    pub const PHANTOM_BIAS: u64 = 11;
}
