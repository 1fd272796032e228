//! Seed derivation.
//!
//! Every random stream in the crate is keyed by a master seed, a stream tag
//! and one or more ordinals:
//!
//! ```text
//! derived = splitmix64(splitmix64(master ^ tag) ^ index)
//! ```
//!
//! Multiple ordinals fold left, one `splitmix64(acc ^ index)` per ordinal.
//! Generation order therefore never affects the values a stream produces.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Values are part of the on-disk reproducibility contract.
pub mod tags {
    pub const SELECT: u64 = 0x5345_4c45_4354_0001;
    pub const CORRUPT_MLM: u64 = 0x4d4c_4d00_0000_0002;
    pub const CORRUPT_SR: u64 = 0x5352_0000_0000_0003;
    pub const CORRUPT_FIRST_CHAR: u64 = 0x4643_0000_0000_0004;
    pub const CORRUPT_ASCII: u64 = 0x4153_4349_4900_0005;
    pub const CORRUPT_RANDOM: u64 = 0x524e_4400_0000_0006;
    pub const RANDOM_LABEL: u64 = 0x524e_444c_4142_0007;
    pub const RANDOM_LABEL_RESAMPLED: u64 = 0x524e_4452_5300_0008;
    pub const EPOCH_SHUFFLE: u64 = 0x5348_5546_0000_0009;
    pub const DROPOUT: u64 = 0x4452_4f50_0000_000a;
    pub const INIT: u64 = 0x494e_4954_0000_000b;
    pub const PROBE: u64 = 0x5052_4f42_4500_000c;
    pub const SYNTH: u64 = 0x5359_4e54_4800_000d;
    pub const FINETUNE: u64 = 0x4654_554e_4500_000e;
}

/// The splitmix64 finaliser (Steele, Lea, Flood).
#[inline]
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, tag: u64, indices: &[u64]) -> u64 {
    let mut acc = splitmix64(master ^ tag);
    for &i in indices {
        acc = splitmix64(acc ^ i);
    }
    acc
}

pub fn stream(master: u64, tag: u64, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag, indices))
}

/// Maps a 64-bit hash onto `0..n` without modulo bias worth speaking of.
#[inline]
pub fn bounded(hash: u64, n: u64) -> u64 {
    ((hash as u128 * n as u128) >> 64) as u64
}
