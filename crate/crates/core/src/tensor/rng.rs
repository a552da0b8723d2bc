//! Deterministic random source.
//!
//! The generator is xoshiro256++ with its 256-bit state filled from the
//! 64-bit seed by four successive splitmix64 outputs:
//!
//! ```text
//! splitmix64:  z = (s += 0x9E3779B97F4A7C15)
//!              z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//!              z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//!              return z ^ (z >> 31)
//!
//! xoshiro256++: result = rotl(s0 + s3, 23) + s0
//!              t = s1 << 17
//!              s2 ^= s0; s3 ^= s1; s1 ^= s2; s0 ^= s3
//!              s2 ^= t;  s3 = rotl(s3, 45)
//! ```
//!
//! Uniform floats take the top 53 bits of one draw. Gaussian draws use the
//! ziggurat sampler from `rand_distr`. All arithmetic is integer or IEEE-754
//! so identical seeds give identical streams on every platform.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

/// The splitmix64 output function applied to `x + 0x9E3779B97F4A7C15`.
pub fn mix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: Xoshiro256PlusPlus,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream for a sub-task, seeded with `mix64(seed) ^ stream`.
    ///
    /// Scrambling first keeps `{seed ^ i}` for small seeds from being a mere
    /// permutation of the streams of another small seed.
    pub fn derive(seed: u64, stream: u64) -> Self {
        Rng::new(mix64(seed) ^ stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.unit()
    }

    pub fn gaussian(&mut self, mean: f64, std: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.inner);
        mean + std * z
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n as u64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}
