// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded randomness. Every random draw in the crate flows through here.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent seed for a named sub-task.
pub fn sub_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, then one splitmix64 round
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(seed ^ h)
}

/// Derives the `index`-th seed of a numbered family.
pub fn indexed_seed(seed: u64, index: u64) -> u64 {
    splitmix(seed.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws `n` samples from `N(0, std^2)`.
pub fn gaussian_vec(rng: &mut Rng, n: usize, std: f64) -> alloc::vec::Vec<f64> {
    if std == 0.0 {
        return alloc::vec![0.0; n];
    }
    let dist = Normal::new(0.0, std).expect("finite non-negative std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sub_seeds_differ_by_label() {
        assert_ne!(sub_seed(7, "data"), sub_seed(7, "pretrain"));
        assert_eq!(sub_seed(7, "data"), sub_seed(7, "data"));
        assert_ne!(indexed_seed(7, 0), indexed_seed(7, 1));
    }

    #[test]
    fn gaussian_is_reproducible() {
        let a = gaussian_vec(&mut seeded(3), 5, 1.0);
        let b = gaussian_vec(&mut seeded(3), 5, 1.0);
        assert_eq!(a, b);
        assert_eq!(gaussian_vec(&mut seeded(3), 3, 0.0), alloc::vec![0.0; 3]);
    }
}
