//! Root-seed fan-out into independent per-stage streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
pub fn stage_hash(stage: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in stage.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Stream `index` of `stage` under `root`. Streams with different
/// (stage, index) pairs never overlap.
pub fn stream(root: u64, stage: &str, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stage_hash(stage) ^ index);
    rng
}

/// Derives a plain seed, for components that take a `u64`.
pub fn derive_seed(root: u64, stage: &str, index: u64) -> u64 {
    use rand::RngCore;
    stream(root, stage, index).next_u64()
}
