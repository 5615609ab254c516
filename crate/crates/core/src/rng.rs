//! Seed-derived RNG streams.
//!
//! Every random draw in the crate comes from a ChaCha stream addressed by
//! (master seed, purpose tag, indices). Streams never depend on execution
//! order, so any stage can be re-run or re-ordered without changing results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags. Values are arbitrary but must never change once data has
/// been written with them.
pub mod tag {
    pub const SCENE_FIELD: u64 = 0x01;
    pub const TRAJECTORY: u64 = 0x02;
    pub const FRAME_NOISE: u64 = 0x03;
    pub const PERTURB: u64 = 0x04;
    pub const DESC_PATTERN: u64 = 0x05;
    pub const RANSAC: u64 = 0x06;
    pub const LABEL_MATCH: u64 = 0x07;
    pub const NET_INIT: u64 = 0x08;
    pub const SHUFFLE: u64 = 0x09;
    pub const DROPOUT: u64 = 0x0a;
    pub const EVAL_MATCH: u64 = 0x0b;
    pub const EPISODE: u64 = 0x0c;
    pub const MISC: u64 = 0x0d;
    pub const EVAL_SCENE: u64 = 0x0e;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Collapses (tag, parts) into a single stream id.
fn stream_id(tag: u64, parts: &[u64]) -> u64 {
    let mut h = splitmix(tag ^ 0x632b_e590_4e22_c13d);
    for &p in parts {
        h = splitmix(h ^ p);
    }
    h
}

/// An independent RNG stream for the given purpose. The master seed selects
/// the ChaCha key; (tag, parts) select the stream within it.
pub fn stream(seed: u64, tag: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(tag, parts));
    rng
}

/// A derived scalar seed, for stages that take a plain u64 (scene
/// generation per episode, for instance) rather than a stream.
pub fn derive_seed(seed: u64, tag: u64, parts: &[u64]) -> u64 {
    splitmix(seed ^ stream_id(tag, parts))
}
