//! Seeded randomness shared by every generator in the crate.
//!
//! All streams are ChaCha8 seeded through [`rand::SeedableRng::seed_from_u64`].
//! Sub-seeds are derived with the SplitMix64 finalizer so that a stream for
//! `(experiment, client, round)` does not depend on how many other clients
//! exist. Permutations use an explicit Fisher–Yates pass whose index draw is
//! Lemire's nearly-divisionless method on `next_u64`, so the order is fixed
//! by this file and not by the `rand` version.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a list of words into one seed. Order-sensitive.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6A09_E667_F3BC_C909, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Uniform integer in `[0, bound)`; `bound` must be nonzero.
pub fn uniform_below(rng: &mut impl RngCore, bound: u64) -> u64 {
    debug_assert!(bound > 0);
    let mut m = u128::from(rng.next_u64()) * u128::from(bound);
    let mut low = m as u64;
    if low < bound {
        let threshold = bound.wrapping_neg() % bound;
        while low < threshold {
            m = u128::from(rng.next_u64()) * u128::from(bound);
            low = m as u64;
        }
    }
    (m >> 64) as u64
}

/// In-place Fisher–Yates shuffle.
pub fn shuffle<T>(items: &mut [T], rng: &mut impl RngCore) {
    for i in (1..items.len()).rev() {
        let j = uniform_below(rng, i as u64 + 1) as usize;
        items.swap(i, j);
    }
}

/// A uniformly random permutation of `0..len` for the given seed.
pub fn permutation(len: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    shuffle(&mut order, &mut rng_from_seed(seed));
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutation_is_a_bijection() {
        for seed in 0..20 {
            let mut p = permutation(37, seed);
            p.sort_unstable();
            assert_eq!(p, (0..37).collect::<Vec<_>>());
        }
    }

    #[test]
    fn derive_seed_depends_on_order() {
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
        assert_eq!(derive_seed(&[7, 3, 9]), derive_seed(&[7, 3, 9]));
    }

    #[test]
    fn uniform_below_covers_range() {
        let mut rng = rng_from_seed(5);
        let mut seen = [0usize; 6];
        for _ in 0..6000 {
            seen[uniform_below(&mut rng, 6) as usize] += 1;
        }
        assert!(seen.iter().all(|&c| c > 800), "{seen:?}");
    }
}
