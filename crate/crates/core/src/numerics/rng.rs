use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;

/// Seeded generator backed by ChaCha8, a counter-based stream cipher.
///
/// The output stream depends only on the seed, never on the platform.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent generator for a named sub-stream of the same seed.
    pub fn fork(&mut self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.inner.next_u64());
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Normal with standard deviation `std`, resampled until within ±2·std.
    pub fn trunc_normal(&mut self, std: f64) -> f64 {
        loop {
            let x = self.normal();
            if x.abs() <= 2.0 {
                return x * std;
            }
        }
    }

    pub fn normal_vec<S: Scalar>(&mut self, n: usize, std: f64) -> Vec<S> {
        (0..n).map(|_| S::of(self.normal() * std)).collect()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}
