//! Counter-based deterministic random stream.
//!
//! Every draw is a pure function of `(seed, counter)` through the SplitMix64
//! finalizer, so a stream's full state is two `u64` values. Identical seeds
//! produce bit-identical sequences on every platform, streams can be
//! checkpointed mid-run, and per-trial streams derived from a master seed are
//! independent of scheduling order.

use serde::{Deserialize, Serialize};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer (Steele, Lea & Flood 2014).
#[inline]
fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic counter-based random stream.
///
/// Draw `i` of a stream with seed `s` is `splitmix64(s ^ splitmix64(i))`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    seed: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed, counter: 0 }
    }

    /// Child stream for sub-task `index` (trial, worker, ...). Children with
    /// distinct indices never share a draw sequence with each other or with
    /// the parent.
    pub fn derive(master_seed: u64, index: u64) -> Self {
        let seed = splitmix64(master_seed) ^ splitmix64(index.wrapping_mul(GOLDEN).wrapping_add(1));
        RngStream::new(splitmix64(seed))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Restore a stream captured by `(seed, counter)`.
    pub fn from_state(seed: u64, counter: u64) -> Self {
        RngStream { seed, counter }
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = splitmix64(self.seed ^ splitmix64(self.counter));
        self.counter = self.counter.wrapping_add(1);
        v
    }

    /// Uniform draw in `[0, 1)` with 53 bits of mantissa.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `(0, 1]`; safe as a logarithm argument.
    pub fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller. Consumes exactly two draws so the
    /// stream state stays a pure counter (no cached spare).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_scaled(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.normal()
    }

    /// Unbiased draw in `[0, n)` by rejection.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "next_below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Fisher-Yates shuffle, consuming one (or more, on rejection) draws per swap.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}
