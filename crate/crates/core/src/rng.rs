//! Seeded random number generation.
//!
//! Every stochastic routine draws from [`SeededRng`], a xoshiro256++ generator
//! (a 64-bit xorshift-family generator: state 4×u64, output
//! `rotl(s0 + s3, 23) + s0`, shift/rotate constants 17 and 45). Seeding expands
//! the `u64` seed through SplitMix64 (increment `0x9e3779b97f4a7c15`, mixers
//! `0xbf58476d1ce4e5b9` and `0x94d049bb133111eb`). Both algorithms are fully
//! specified, so streams are identical across platforms.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::scalar::Scalar;

pub type SeededRng = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}

/// Uniform sample in `[lo, hi)`.
pub fn uniform<S: Scalar>(rng: &mut SeededRng, lo: f64, hi: f64) -> S {
    S::lit(rng.random_range(lo..hi))
}

/// Standard normal sample scaled by `sigma`.
pub fn normal<S: Scalar>(rng: &mut SeededRng, sigma: f64) -> S {
    let z: f64 = rng.sample(StandardNormal);
    S::lit(z * sigma)
}

/// Fisher-Yates shuffle of `0..n`.
pub fn permutation(rng: &mut SeededRng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
