//! Seeded random streams.
//!
//! Every source of randomness is a ChaCha8 stream derived from a `(label, seed)`
//! pair, so data, initialization, and noise draw from independent generators
//! and ablation variants share identical data no matter which parameters they
//! instantiate.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic stream generator.
pub struct Stream(ChaCha8Rng);

fn mix(label: &str, seed: u64) -> u64 {
    // FNV-1a over the label, then splitmix the seed in.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = h ^ seed.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl Stream {
    pub fn new(label: &str, seed: u64) -> Self {
        Stream(ChaCha8Rng::seed_from_u64(mix(label, seed)))
    }

    /// Child stream with its own label; draws do not perturb the parent.
    pub fn fork(&self, label: &str) -> Self {
        // Forks depend only on the parent's seed material, never on how many
        // values the parent has already produced.
        let base = self.0.get_seed();
        let mut h: u64 = 0;
        for chunk in base.chunks(8) {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            h ^= u64::from_le_bytes(buf);
        }
        Stream::new(label, h)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.0.random_range(lo..hi)
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1: f64 = self.0.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = self.0.random_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn uniform_vec(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.uniform(lo, hi)).collect()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.0.random_range(0..=i);
            xs.swap(i, j);
        }
    }
}
