use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives an RNG from a base seed and a string key.
///
/// Every seeded decision in the pipeline goes through this so that the
/// outcome for one key (a task name, a sample id) is independent of how many
/// other keys exist or in what order they are visited.
pub(crate) fn keyed_rng(seed: u64, key: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(key.as_bytes());
    ChaCha8Rng::from_seed(hasher.finalize().into())
}
