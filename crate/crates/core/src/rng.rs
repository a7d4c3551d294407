//! Deterministic random streams keyed by `(seed, domain, index)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// An independent generator for one `(seed, domain, index)` triple. Streams for
/// different triples do not overlap in practice, and the same triple always
/// yields the same sequence.
pub fn stream(seed: u64, domain: &str, index: u64) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((domain.len() as u64).to_le_bytes());
    h.update(domain.as_bytes());
    h.update(index.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}
