//! Deterministic seed derivation.
//!
//! Every run owns a single root seed. All randomness (dataset sampling,
//! weight init, batch shuffling, noise draws, evaluation sampling) flows
//! from substreams derived from that root with a domain tag and an index,
//! so that independent pieces of work can run in any order — or in
//! parallel — without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the tag string; good enough to separate domains.
fn tag_hash(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// splitmix64 finalizer; decorrelates nearby inputs.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `root` for the given domain tag and index.
pub fn derive(root: u64, tag: &str, index: u64) -> u64 {
    mix(root ^ mix(tag_hash(tag)) ^ mix(index.wrapping_mul(0x2545_f491_4f6c_dd1d)))
}

/// A ChaCha8 stream seeded from (`root`, `tag`, `index`). Independent calls
/// with distinct tags/indices yield statistically independent streams.
pub fn substream(root: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, tag, index))
}
