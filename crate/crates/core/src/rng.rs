//! Named, hash-derived RNG streams.
//!
//! Every consumer of randomness asks for its own stream keyed by
//! `(master seed, stream name, indices)`. Streams are independent of the
//! order in which they are requested, so adding a new consumer never
//! perturbs an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Master seed of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

impl RngSeed {
    /// Derive the child stream `name[indices...]`.
    pub fn stream(self, name: &str, indices: &[u64]) -> StreamRng {
        let mut hasher = Sha256::new();
        hasher.update(self.0.to_le_bytes());
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        for i in indices {
            hasher.update(i.to_le_bytes());
        }
        ChaCha8Rng::from_seed(hasher.finalize().into())
    }

    /// Derive a child seed, for handing a whole sub-experiment its own namespace.
    pub fn child(self, name: &str, indices: &[u64]) -> RngSeed {
        use rand::RngCore;
        RngSeed(self.stream(name, indices).next_u64())
    }
}

impl From<u64> for RngSeed {
    fn from(v: u64) -> Self {
        RngSeed(v)
    }
}
