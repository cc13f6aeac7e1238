//! Seedable random number generation with a frozen seed -> stream mapping.
//!
//! The mapping is: a `u64` seed (optionally mixed with stream labels through
//! splitmix64) keys a ChaCha8 generator; normal draws come from `rand_distr`'s
//! Box-Muller-free `StandardNormal` on `f64` and are narrowed to the target
//! dtype. Identical seeds give identical draw sequences across runs of the
//! same build.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Stream labels keeping independent random uses of one run seed disjoint.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Init,
    Shuffle,
    Dropout,
    Latent,
    Preview,
    Data,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Shuffle => 2,
            Stream::Dropout => 3,
            Stream::Latent => 4,
            Stream::Preview => 5,
            Stream::Data => 6,
        }
    }
}

pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Deterministic sub-generator for `(seed, stream, index)`; stateless, so
    /// a resumed run can rebuild the exact generator for any step.
    pub fn from_stream(seed: u64, stream: Stream, index: u64) -> Self {
        let mixed = splitmix64(splitmix64(seed ^ splitmix64(stream.tag())) ^ index);
        Rng::from_seed(mixed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.gen()
    }

    /// Standard normal draw.
    pub fn normal_f64(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }

    pub fn fill_normal<T: Scalar>(&mut self, out: &mut [T]) {
        for v in out.iter_mut() {
            *v = T::from_f64(self.normal_f64());
        }
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform_f64(&mut self, lo: f64, hi: f64) -> f64 {
        self.0.gen_range(lo..hi)
    }

    pub fn fill_uniform<T: Scalar>(&mut self, out: &mut [T], lo: f64, hi: f64) {
        for v in out.iter_mut() {
            *v = T::from_f64(self.uniform_f64(lo, hi));
        }
    }

    /// Bernoulli draw: true with probability `p`.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.0.gen::<f64>() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.0.gen_range(0..=i);
            xs.swap(i, j);
        }
    }

    pub fn gen_range_usize(&mut self, lo: usize, hi: usize) -> usize {
        self.0.gen_range(lo..hi)
    }
}
