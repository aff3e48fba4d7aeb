//! Named, seed-derived random streams.
//!
//! Every consumer of randomness asks for a stream by name. Streams are ChaCha
//! counter streams keyed by the run seed and a digest of the name, so adding
//! or reordering consumers never perturbs the numbers another consumer sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub fn name_hash(name: &str) -> u64 {
    let digest = Sha256::digest(name.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stream(seed: u64, name: &str) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(name_hash(name));
    rng
}

/// Sub-stream for the `index`-th item of a named family (samples, steps).
pub fn indexed_stream(seed: u64, name: &str, index: u64) -> StreamRng {
    let mut rng = stream(seed, name);
    rng.set_word_pos(u128::from(index) << 32);
    rng
}
