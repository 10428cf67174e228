//! Seeded, platform-independent random stream.
//!
//! ChaCha8 is used for every draw so that the same seed and the same call
//! sequence give the same stream on every target.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ALGORITHM: &str = "chacha8";

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> &'static str {
        ALGORITHM
    }

    /// Independent child stream keyed by `index` (`seed XOR index`).
    ///
    /// Per-sample streams derived this way make batch results independent
    /// of the order or thread the samples are processed in.
    pub fn fork(&self, index: u64) -> Rng {
        Rng::new(self.seed ^ index)
    }

    /// Child stream keyed by two indices, e.g. (epoch, sample).
    pub fn fork2(&self, a: u64, b: u64) -> Rng {
        Rng::new(self.seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b)
    }

    pub fn uniform(&mut self) -> f32 {
        self.inner.random::<f32>()
    }

    pub fn uniform_range(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.uniform()
    }

    /// Bernoulli trial. `p <= 0` never fires, `p >= 1` always fires.
    pub fn bernoulli(&mut self, p: f32) -> bool {
        // Always consume one draw so the stream position doesn't depend on p.
        let u = self.inner.random::<f32>();
        u < p
    }

    pub fn normal(&mut self, mean: f32, std: f32) -> f32 {
        let d = rand_distr::Normal::new(mean, std).expect("std must be finite and non-negative");
        rand_distr::Distribution::sample(&d, &mut self.inner)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.inner.random_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }
}
