//! Deterministic seed splitting.
//!
//! Every random stream in the simulator is a ChaCha8 generator keyed by a seed
//! derived from the master seed through [`derive`], a SplitMix64 finalizer
//! applied to `seed ^ tag` pairs. Streams are named by tags so that adding or
//! skipping a computation never shifts any other stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags used across the crate.
pub mod tag {
    pub const TASK: u64 = 0x7461_736b;
    pub const INIT: u64 = 0x696e_6974;
    pub const DOMAIN: u64 = 0x646f_6d61;
    pub const CLIENT: u64 = 0x636c_6e74;
    pub const ROUND: u64 = 0x726f_756e;
    pub const LABELED_BATCH: u64 = 0x6c62_6174;
    pub const UNLABELED_BATCH: u64 = 0x7562_6174;
    pub const WEAK_LABELED: u64 = 0x776b_6c62;
    pub const WEAK_UNLABELED: u64 = 0x776b_7562;
    pub const STRONG: u64 = 0x7374_726e;
    pub const DROPOUT_LABELED: u64 = 0x6470_6c62;
    pub const DROPOUT_UNLABELED: u64 = 0x6470_7562;
    pub const STEP: u64 = 0x7374_6570;
    pub const SAMPLE: u64 = 0x736d_706c;
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a sequence of tags.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}

/// A generator for the stream named by `tags` under `seed`.
pub fn rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}
