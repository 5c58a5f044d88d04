//! Seeded, splittable random number generation.
//!
//! Every stochastic component (initialization, mask sampling, shuffling,
//! dropout) draws from a `Rng` derived from a single 64-bit experiment seed.
//! Streams are split by purpose so that, e.g., adding an extra consumer of
//! randomness in one place does not perturb draws elsewhere.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// A deterministic random stream: same seed, same stream id, same draws.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Derive an independent stream from the same seed. Streams with
    /// different ids never overlap; the same id always yields the same
    /// stream regardless of draw order elsewhere.
    pub fn stream(&self, id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(id);
        Rng { seed: self.seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw from [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        Uniform::new(lo, hi).expect("uniform bounds").sample(&mut self.inner)
    }

    /// Zero-mean normal draw with the given standard deviation.
    pub fn normal(&mut self, std: f64) -> f64 {
        Normal::new(0.0, std).expect("normal std").sample(&mut self.inner)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        xs.shuffle(&mut self.inner);
    }

    /// k distinct indices drawn uniformly from 0..n (partial Fisher-Yates),
    /// returned in ascending order.
    pub fn choose_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot choose {k} from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.inner.random_range(0..n - i);
            pool.swap(i, j);
        }
        let mut picked = pool[..k].to_vec();
        picked.sort_unstable();
        picked
    }
}
