//! Deterministic random streams.
//!
//! Every stochastic routine takes its generator from [`keyed_rng`], so a run
//! is fully determined by one seed and the keys used to derive substreams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent ChaCha stream for `(seed, key)`.
pub fn keyed_rng(seed: u64, key: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key);
    rng
}

/// Mixes a label and an index into a stream key.
pub fn stream_key(label: &str, index: u64) -> u64 {
    // FNV-1a over the label, then the index
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes().chain(index.to_le_bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
