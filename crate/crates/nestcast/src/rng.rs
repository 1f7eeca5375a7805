//! Seeded RNG sub-streams.
//!
//! All randomness in the crate flows from one `u64` seed through named
//! sub-streams, so that e.g. graph construction and noise generation stay
//! independent of each other when one of them changes.

use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};

/// Derive a deterministic RNG for `(seed, name)`.
pub fn substream(seed: u64, name: &str) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(key)
}

/// Member streams for ensembles: `substream(seed, "members")` keyed further
/// by member index.
pub fn member_stream(seed: u64, name: &str, index: u64) -> ChaCha12Rng {
    substream(seed, &format!("{name}/{index}"))
}
