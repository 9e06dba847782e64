//! Seed derivation. Every random stream in the toolkit is a ChaCha8 generator
//! seeded from a root seed and a path of integers, so parallel workers never
//! share generator state and any stream can be recreated in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Namespaces keeping independent random streams apart.
pub mod ns {
    pub const CORPUS: u64 = 0x636f_7270;
    pub const NOISE_BANK: u64 = 0x6e6f_6973;
    pub const TRAIN_NOISE: u64 = 0x7472_6e6e;
    pub const TRAIN_ORDER: u64 = 0x7472_6f72;
    pub const INIT: u64 = 0x696e_6974;
    pub const EVAL: u64 = 0x6576_616c;
    pub const ANALYSIS: u64 = 0x616e_6c7a;
}

/// SplitMix64 finaliser.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `parts` into `root`, order-sensitively.
pub fn derive(root: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(root), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(root: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, parts))
}
