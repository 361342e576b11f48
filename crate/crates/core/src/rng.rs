//! Counter-based, splittable random streams.
//!
//! A stream is identified by `(seed, counter)`. The counter is the ChaCha
//! word position, so two streams with equal state always produce the same
//! draws. Child streams are keyed by `(seed, label)` and never depend on how
//! far the parent has advanced, which makes per-item streams independent of
//! execution order.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure, Result};
use crate::field::Field;

#[derive(Debug, Clone)]
pub struct RandomStream {
    seed: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self::at(seed, 0)
    }

    /// Reconstructs a stream at an explicit counter position.
    pub fn at(seed: u64, counter: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_word_pos(counter as u128);
        RandomStream { seed, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.rng.get_word_pos() as u64
    }

    /// Child stream keyed by a string label.
    pub fn child(&self, label: &str) -> RandomStream {
        RandomStream::new(splitmix64(self.seed ^ splitmix64(fnv1a(label.as_bytes()))))
    }

    /// Child stream keyed by an index (batch item, sample number).
    pub fn child_idx(&self, label: &str, idx: u64) -> RandomStream {
        let base = splitmix64(self.seed ^ splitmix64(fnv1a(label.as_bytes())));
        RandomStream::new(splitmix64(base ^ splitmix64(idx.wrapping_add(1))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.gen_range(lo..=hi)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Picks an index proportional to non-negative `weights` (need not sum to 1).
    pub fn weighted_index(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                return i;
            }
            u -= w;
        }
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }
}

pub fn draw_normal(rs: &mut RandomStream, shape: &[usize]) -> Result<Field> {
    ensure!(!shape.is_empty(), Invalid, "empty shape");
    let n: usize = shape.iter().product();
    ensure!(n > 0, Invalid, "zero-sized shape {:?}", shape);
    Field::new(shape.to_vec(), (0..n).map(|_| rs.normal() as f32).collect())
}

pub fn draw_uniform(rs: &mut RandomStream, shape: &[usize]) -> Result<Field> {
    ensure!(!shape.is_empty(), Invalid, "empty shape");
    let n: usize = shape.iter().product();
    ensure!(n > 0, Invalid, "zero-sized shape {:?}", shape);
    Field::new(shape.to_vec(), (0..n).map(|_| rs.uniform() as f32).collect())
}

/// Draws one index from a normalized probability row.
pub fn draw_categorical(rs: &mut RandomStream, probs: &[f32]) -> Result<usize> {
    ensure!(!probs.is_empty(), Invalid, "empty probability row");
    ensure!(
        probs.iter().all(|&p| p >= 0.0 && p.is_finite()),
        Invalid,
        "negative or non-finite probability"
    );
    let total: f64 = probs.iter().map(|&p| p as f64).sum();
    ensure!(
        (total - 1.0).abs() <= 1e-6,
        Invalid,
        "probabilities sum to {total}, not 1"
    );
    let u = rs.uniform() * total;
    let mut acc = 0.0f64;
    for (i, &p) in probs.iter().enumerate() {
        acc += p as f64;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(probs.iter().rposition(|&p| p > 0.0).unwrap_or(0))
}
