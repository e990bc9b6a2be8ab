//! Seeded randomness. One root seed per run; every consumer gets its own stream derived
//! from the root seed and a fixed label, so draws in one module never shift another.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

pub type SimRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct RngRoot {
    seed: u64,
}

impl RngRoot {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fork(&self, label: &str) -> SimRng {
        let mut h = Sha256::new();
        h.update(self.seed.to_be_bytes());
        h.update(label.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }
}
