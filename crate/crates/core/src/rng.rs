//! Seeded randomness.
//!
//! All random draws in the crate come from a SplitMix64 stream (Steele,
//! Lea and Flood's 64-bit mixer with increment `0x9e3779b97f4a7c15`), as
//! provided by `rand_xoshiro`. Uniform floats use `rand`'s 53-bit
//! conversion. Sub-streams are derived by hashing `(seed, label)` through one
//! SplitMix64 step so independent consumers never share state.

use rand::{Rng, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::SplitMix64;

use crate::matrix::Matrix;

#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: SplitMix64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: SplitMix64::seed_from_u64(seed),
        }
    }

    /// A generator for an independent sub-stream identified by `label`.
    pub fn derive(seed: u64, label: u64) -> Self {
        let mut mixer = SplitMix64::seed_from_u64(seed ^ label.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        Self::new(mixer.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform in `[lo, hi)`; returns `lo` when the interval is empty.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return lo;
        }
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..bound`.
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0);
        self.inner.random_range(0..bound)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, std_dev: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.normal() * std_dev)
    }

    pub fn uniform_matrix(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.uniform_in(lo, hi))
    }
}
