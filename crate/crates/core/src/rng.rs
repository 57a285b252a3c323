//! Seed plumbing. Every random stream in the crate is a `ChaCha8Rng` whose
//! seed is derived from a master seed and a stream label, so adding a new
//! stream never perturbs the existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// splitmix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a sequence of stream indices.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(seed: u64, path: &[u64]) -> Rng {
    rng(derive(seed, path))
}

/// Stream labels used with [`derive()`].
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const MASK: u64 = 3;
    pub const POOL: u64 = 4;
    pub const PERTURB: u64 = 5;
    pub const WARM_START: u64 = 6;
    pub const DATA: u64 = 7;
    pub const SPLIT: u64 = 8;
    pub const PRETRAIN: u64 = 9;
    pub const RETARGET: u64 = 10;
    pub const FINETUNE: u64 = 11;
    pub const GRID: u64 = 12;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_separates_streams() {
        assert_ne!(derive(1, &[stream::MASK]), derive(1, &[stream::POOL]));
        assert_ne!(derive(1, &[0, 1]), derive(1, &[1, 0]));
        assert_eq!(derive(42, &[3, 4]), derive(42, &[3, 4]));
    }
}
