//! Seed derivation and random streams.
//!
//! Every random consumer gets its own child seed derived from
//! `(root, component, index)`, so adding a consumer never shifts the
//! randomness seen by another one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Child seed = first 8 bytes of SHA-256(root ‖ len(component) ‖ component ‖ index).
pub fn derive_seed(root: u64, component: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update((component.len() as u64).to_le_bytes());
    h.update(component.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn child_rng(root: u64, component: &str, index: u64) -> Rng {
    rng(derive_seed(root, component, index))
}

/// Hex-encoded SHA-256 digest accumulator used to fingerprint random streams.
#[derive(Clone, Default)]
pub struct StreamDigest(Sha256);

impl StreamDigest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update_f64(&mut self, values: &[f64]) {
        for v in values {
            self.0.update(v.to_le_bytes());
        }
    }

    pub fn update_usize(&mut self, values: &[usize]) {
        for v in values {
            self.0.update((*v as u64).to_le_bytes());
        }
    }

    pub fn hex(&self) -> String {
        self.0
            .clone()
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable_and_component_sensitive() {
        assert_eq!(derive_seed(7, "init", 0), derive_seed(7, "init", 0));
        assert_ne!(derive_seed(7, "init", 0), derive_seed(7, "noise", 0));
        assert_ne!(derive_seed(7, "init", 0), derive_seed(7, "init", 1));
        assert_ne!(derive_seed(7, "init", 0), derive_seed(8, "init", 0));
        // length prefix keeps ("ab", ..) and ("a", ..) apart even with crafted indices
        assert_ne!(derive_seed(0, "ab", 0), derive_seed(0, "a", 0));
    }
}
