//! Reproducible random streams.
//!
//! Every consumer (a sample, an expert, a training step) gets its own
//! `(seed, stream)` pair. ChaCha8 is counter-based, so a stream's draws do not
//! depend on how many values other streams have consumed, and the sequence is
//! identical on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Well-known stream ids, kept apart so unrelated consumers never share draws.
pub mod streams {
    pub const INIT: u64 = 1 << 40;
    pub const SHUFFLE: u64 = 2 << 40;
    pub const TRAIN_STEP: u64 = 3 << 40;
    pub const SAMPLE: u64 = 4 << 40;
    pub const DATA: u64 = 5 << 40;
    pub const METRIC: u64 = 6 << 40;
}

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A fresh stream with the same seed and id `self.stream() + offset`.
    pub fn derive(&self, offset: u64) -> Self {
        Self::new(self.seed, self.stream.wrapping_add(offset))
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
