//! Per-entity random substreams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Stable substream for `entity`: SHA-256 of (seed, entity id) seeds a
/// ChaCha8 generator, so adding an entity leaves every other stream intact.
pub fn substream(seed: u64, entity: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(entity.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}
