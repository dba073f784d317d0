//! Deterministic, keyed random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream whose seed is a
//! hash of the run seed plus a purpose label and any per-event keys (day,
//! draw index, ...). Two runs that share those keys see the same numbers no
//! matter what else they did in between.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Builds a seed from a list of byte keys.
#[derive(Debug, Clone, Default)]
pub struct KeyedSeed {
    hasher: Sha256,
}

impl KeyedSeed {
    pub fn new(label: &str) -> Self {
        let mut k = KeyedSeed::default();
        k.bytes(label.as_bytes());
        k
    }

    pub fn u64(mut self, v: u64) -> Self {
        self.hasher.update(v.to_le_bytes());
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.hasher.update((b.len() as u64).to_le_bytes());
        self.hasher.update(b);
        self
    }

    pub fn rng(self) -> Rng {
        let digest = self.hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest[..32]);
        ChaCha8Rng::from_seed(seed)
    }
}

pub fn seeded(seed: u64, label: &str) -> Rng {
    KeyedSeed::new(label).u64(seed).rng()
}
