//! Seed derivation. Every stage gets its own stream derived from one root seed,
//! so adding a stage never shifts the randomness of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type StageRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable child seed: `splitmix64(root ^ fnv1a(label))`.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(root ^ h)
}

pub fn rng_from(seed: u64) -> StageRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn standard_normals<R: rand::Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(7, "phantom"), derive_seed(7, "phantom"));
        assert_ne!(derive_seed(7, "phantom"), derive_seed(7, "sbdm"));
        assert_ne!(derive_seed(7, "phantom"), derive_seed(8, "phantom"));
    }
}
