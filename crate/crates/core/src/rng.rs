//! Named random streams.
//!
//! Every consumer of randomness (signals, training tokens, label flips,
//! initialization, the clean test set) gets its own ChaCha20 stream keyed by
//! `(base_seed, tag)`, so adding draws to one stage never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub const SIGNALS: &str = "signals";
pub const DATA: &str = "data";
pub const LABEL_NOISE: &str = "label-noise";
pub const INIT: &str = "init";
pub const TEST: &str = "test";
pub const ETF: &str = "etf";

/// 64-bit FNV-1a, used for stream tags and config fingerprints.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a sequence of words into one seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243f_6a88_85a3_08d3, |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Generator for stream `tag` under `base_seed`.
pub fn stream(base_seed: u64, tag: &str) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(base_seed);
    rng.set_stream(fnv1a(tag.as_bytes()));
    rng
}
