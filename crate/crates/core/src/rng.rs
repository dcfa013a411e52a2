//! Seeded randomness.
//!
//! The stream is ChaCha8 (from `rand_chacha`), seeded with a u64. All
//! derived draws (unit doubles, ranges, normals, shuffles) are implemented
//! here so the byte-to-value mapping is pinned by this crate: a given seed
//! produces the same sequence on every platform and in every build.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct SbRng {
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl SbRng {
    pub fn new(seed: u64) -> Self {
        SbRng { inner: ChaCha8Rng::seed_from_u64(seed), spare_normal: None }
    }

    /// Child generator seeded from this stream. Used to give each
    /// subsystem (init, shuffling, augmentation) its own stream.
    pub fn fork(&mut self) -> SbRng {
        SbRng::new(self.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1), 53-bit resolution.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    /// Uniform in [0, n), unbiased (rejection sampling).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let threshold = n.wrapping_neg() % n;
        loop {
            let v = self.next_u64();
            if v >= threshold {
                return v % n;
            }
        }
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.below(n as u64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    /// Standard normal via Box-Muller; pairs are cached so consecutive
    /// draws consume uniforms two at a time.
    pub fn normal_std(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.unit();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        mean + sd * self.normal_std()
    }

    /// Fisher-Yates, descending.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.index(i + 1);
            xs.swap(i, j);
        }
    }
}
