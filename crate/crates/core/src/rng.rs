//! Seeds and deterministic sub-seed derivation.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] seeded by a
//! [`Seed`]. Independent streams are derived with [`hash64`], a splitmix64
//! mix of `(seed, index)`, so results are reproducible across platforms and
//! independent of evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::scalar::Real;

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u64);

impl Seed {
    pub fn new(value: u64) -> Self {
        Seed(value)
    }

    pub fn value(self) -> u64 {
        self.0
    }

    /// Sub-seed for stream `index`.
    pub fn derive(self, index: u64) -> Seed {
        Seed(hash64(self.0, index))
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

impl From<u64> for Seed {
    fn from(v: u64) -> Self {
        Seed(v)
    }
}

/// splitmix64 finalizer.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `hash64(seed, index) = splitmix64(seed ^ splitmix64(index))`.
#[inline]
pub fn hash64(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index))
}

/// Order-sensitive hash of a slice of scalars (via their `f64` bit patterns).
pub fn content_hash<T: Real>(values: &[T]) -> u64 {
    values.iter().fold(0x6a09_e667_f3bc_c908, |acc, v| hash64(acc, v.as_f64().to_bits()))
}

/// `n` iid standard normal draws.
pub fn standard_normals<T: Real>(seed: Seed, n: usize) -> Vec<T> {
    let mut rng = seed.rng();
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::lit(z)
        })
        .collect()
}
