//! Labelled random streams derived from one master seed.
//!
//! Each consumer asks for a stream by label plus a list of indices (epoch,
//! batch, copy number, ...). The stream seed is the SHA-256 of the master
//! seed, the label and the indices, so streams are independent of the order
//! in which they are requested.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

pub const SPLIT: &str = "split";
pub const AUGMENT: &str = "augment";
pub const OVERSAMPLE: &str = "oversample";
pub const INIT: &str = "init";
pub const SHUFFLE: &str = "shuffle";
pub const DROPOUT: &str = "dropout";

pub fn stream(seed: u64, label: &str, indices: &[u64]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    for i in indices {
        hasher.update(i.to_le_bytes());
    }
    ChaCha8Rng::from_seed(hasher.finalize().into())
}
