//! Seeds and the derivation scheme that splits one root seed into
//! independent per-purpose streams.
//!
//! A child seed is `splitmix64(parent ^ fnv1a64(label))`, or for numbered
//! children `splitmix64(splitmix64(parent) ^ index)`. Every random draw in the
//! crate goes through a [`ChaCha8Rng`] built from a derived seed, so a root
//! seed fixes every episode, dataset split and initialisation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;

/// The simulator's random bits: one 64-bit value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Seed(pub u64);

impl Seed {
    /// Stream for a named purpose (`"train"`, `"eval"`, `"init"`, ...).
    pub fn derive(self, label: &str) -> Seed {
        Seed(splitmix64(self.0 ^ fnv1a64(label.as_bytes())))
    }

    /// The `index`-th child, used for per-episode seeds.
    pub fn child(self, index: u64) -> Seed {
        Seed(splitmix64(splitmix64(self.0) ^ index))
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

impl fmt::Display for Seed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u64> for Seed {
    fn from(v: u64) -> Self {
        Seed(v)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}
