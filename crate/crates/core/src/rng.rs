//! Splittable, seeded random number generation.
//!
//! Every random decision in a run flows from one root [`SeededRng`]. Child
//! streams are derived with [`SeededRng::split`] from the *root seed* and a
//! string label, never from the parent's current position, so a child stream
//! is the same no matter how much the parent (or any sibling) has been used.
//! Per-client streams therefore do not depend on client execution order.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Matrix;

#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent child stream keyed by `(seed, label)`.
    pub fn split(&self, label: &str) -> SeededRng {
        let child = splitmix64(self.seed ^ splitmix64(fnv1a(label.as_bytes())));
        SeededRng::new(child)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }

    /// A `rows × cols` matrix of i.i.d. `Normal(mean, stddev)` samples.
    pub fn normal_matrix(&mut self, rows: usize, cols: usize, mean: f64, stddev: f64) -> Matrix {
        assert!(stddev >= 0.0, "stddev must be non-negative");
        let data = (0..rows * cols)
            .map(|_| mean + stddev * self.standard_normal())
            .collect();
        Matrix::from_vec(rows, cols, data).expect("non-empty normal matrix")
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// `rng_normal` as a free function: a `rows × cols` matrix of normal draws.
pub fn rng_normal(rng: &mut SeededRng, rows: usize, cols: usize, mean: f64, stddev: f64) -> Matrix {
    rng.normal_matrix(rows, cols, mean, stddev)
}
