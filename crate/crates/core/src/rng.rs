//! Seeded randomness.
//!
//! Every stochastic routine takes an [`RngSeed`] and builds a ChaCha8 stream
//! from it (`rand_chacha::ChaCha8Rng::seed_from_u64`). ChaCha8 is a
//! counter-based generator with a platform-independent output sequence, so
//! identical seeds reproduce identical results on every target. Independent
//! sub-streams (per tree, per fold, per replication) are obtained with
//! [`RngSeed::derive`], which mixes the parent seed and a stream index through
//! the SplitMix64 finalizer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn new(seed: u64) -> Self {
        RngSeed(seed)
    }

    pub fn rng(self) -> Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Child seed for sub-stream `stream`. Distinct streams give unrelated seeds.
    pub fn derive(self, stream: u64) -> RngSeed {
        let mixed = splitmix64(self.0 ^ splitmix64(stream.wrapping_add(0x9E37_79B9_7F4A_7C15)));
        RngSeed(mixed)
    }
}

impl From<u64> for RngSeed {
    fn from(seed: u64) -> Self {
        RngSeed(seed)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
