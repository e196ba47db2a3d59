//! Seedable, splittable random number generation.
//!
//! Every generator is a ChaCha20 keystream keyed by a 64-bit seed and
//! addressed by a 64-bit stream id. ChaCha is counter based, so a given
//! `(seed, stream)` pair produces the same sequence on every platform.
//! [`Rng::split`] hands out child generators on fresh stream ids, letting
//! independent consumers draw without perturbing each other.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha20Rng,
    seed: u64,
    next_child: u64,
}

impl Rng {
    /// Generator for stream 0 of `seed`.
    pub fn new(seed: u64) -> Self {
        Self::stream(seed, 0)
    }

    /// Generator for an explicit stream of `seed`.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            inner,
            seed,
            next_child: stream.wrapping_mul(1 << 20).wrapping_add(1),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child generator on the next unused stream. Deterministic in the number
    /// of previous splits, independent of how many numbers were drawn.
    pub fn split(&mut self) -> Rng {
        let id = self.next_child;
        self.next_child = self.next_child.wrapping_add(1);
        Rng::stream(self.seed, id)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }
}

/// Tensor of i.i.d. standard normal draws.
pub fn gaussian_sample(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), rng.normal_vec(n)).expect("shape and length agree")
}
