//! Counter-based deterministic random numbers.
//!
//! Every consumer derives its own stream from a root seed and a path of
//! integers (epoch, step, sample, pass, ...), so the values a mask receives
//! do not depend on the order in which other masks were drawn.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic generator backed by the ChaCha8 block function.
///
/// The output for a given `(key, stream)` pair is identical on every platform.
#[derive(Clone, Debug)]
pub struct Rng {
    key: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::keyed(seed)
    }

    fn keyed(key: u64) -> Self {
        Rng {
            key,
            inner: ChaCha8Rng::seed_from_u64(key),
        }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Independent child stream identified by `id`. Does not advance `self`.
    pub fn fork(&self, id: u64) -> Rng {
        Self::keyed(splitmix(self.key ^ splitmix(id.wrapping_add(1))))
    }

    /// Child stream identified by a path of ids, equivalent to chained forks.
    pub fn derive(&self, path: &[u64]) -> Rng {
        path.iter().fold(self.clone(), |r, &id| r.fork(id))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform sample in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform sample in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`. `n` must be non-zero.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        // Lemire's multiply-shift with rejection
        let zone = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= zone {
                return (m >> 64) as u64;
            }
        }
    }

    /// Uniform integer in the inclusive range `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below((hi - lo + 1) as u64) as usize
    }

    /// Standard normal sample (Box-Muller).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
    }

    /// Bernoulli draw that is `true` with probability `p`.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}
