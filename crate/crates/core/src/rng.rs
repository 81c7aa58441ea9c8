//! Seeded random streams.
//!
//! Every consumer derives its own ChaCha stream from `(seed, purpose)` so that
//! adding a draw in one place never shifts the numbers another place sees.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

pub type SeededRng = ChaCha8Rng;

/// Stream for `purpose` under `seed`.
pub fn stream(seed: u64, purpose: &str) -> SeededRng {
    // FNV-1a over the purpose label, folded with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17))
}

pub fn normal(rng: &mut SeededRng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn gaussian(rng: &mut SeededRng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| std * normal(rng))
}

pub fn uniform(rng: &mut SeededRng) -> f64 {
    rng.random::<f64>()
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation(rng: &mut SeededRng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        p.swap(i, j);
    }
    p
}
