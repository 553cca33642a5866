//! Seeded random streams.
//!
//! Every random decision in the pipeline draws from a [`Stream`] that is
//! derived from the run seed plus a path of integer tags (purpose, epoch,
//! iteration, anchor, candidate, ...). Derived streams are independent of
//! the order in which they are created, which lets per-candidate work run in
//! parallel without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Stream purposes used as the first path element.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const EPOCH: u64 = 2;
    pub const ITERATION: u64 = 3;
    pub const INPUT_AUG: u64 = 4;
    pub const CANDIDATE_AUG: u64 = 5;
    pub const EVAL_TRIAL: u64 = 6;
    pub const SYNTH_DOMAIN: u64 = 7;
    pub const SYNTH_IDENTITY: u64 = 8;
    pub const SYNTH_IMAGE: u64 = 9;
    pub const PREVIEW: u64 = 10;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a seed and a tag path into a 256-bit ChaCha key.
pub fn derive_seed(seed: u64, path: &[u64]) -> [u8; 32] {
    let mut h = splitmix64(seed);
    for &p in path {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x5851_f42d_4c95_7f2d)));
    }
    let mut key = [0u8; 32];
    let mut s = h;
    for chunk in key.chunks_exact_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    key
}

pub fn stream(seed: u64, path: &[u64]) -> Stream {
    ChaCha8Rng::from_seed(derive_seed(seed, path))
}
