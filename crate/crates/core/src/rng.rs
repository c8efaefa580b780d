//! Deterministic seeded random numbers.
//!
//! Every source of randomness in the crate goes through [`Rng`] so that runs
//! are reproducible bit-for-bit given the same seed on the same platform.

use rand::{Rng as _, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::scalar::Scalar;

pub struct Rng {
    inner: Xoshiro256PlusPlus,
}

impl Rng {
    pub fn seed_from(seed: u64) -> Self {
        Rng {
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    /// Uniform in [lo, hi).
    pub fn uniform<S: Scalar>(&mut self, lo: f64, hi: f64) -> S {
        S::from_f64(self.inner.gen_range(lo..hi))
    }

    /// Standard normal via Box-Muller.
    pub fn normal<S: Scalar>(&mut self) -> S {
        let u1: f64 = self.inner.gen_range(f64::EPSILON..1.0);
        let u2: f64 = self.inner.gen_range(0.0..1.0);
        S::from_f64((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos())
    }

    pub fn uniform_vec<S: Scalar>(&mut self, n: usize, lo: f64, hi: f64) -> Vec<S> {
        (0..n).map(|_| self.uniform(lo, hi)).collect()
    }

    pub fn gen_range_usize(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.gen_range(lo..hi)
    }

    pub fn gen_f64(&mut self) -> f64 {
        self.inner.gen_range(0.0..1.0)
    }

    /// Derive an independent stream for a sub-component.
    pub fn fork(&mut self) -> Self {
        Rng {
            inner: Xoshiro256PlusPlus::seed_from_u64(self.inner.gen()),
        }
    }
}
