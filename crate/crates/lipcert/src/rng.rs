//! Counter-based deterministic randomness.
//!
//! The mask stream for a given `(seed, epoch, sample)` address is a pure
//! function of that address: batches can be processed in any order, serially
//! or in parallel, and every sample sees exactly the same random draws. This
//! is the property that makes stochastic SortNet training reproducible
//! independent of thread count.
//!
//! The generator is splitmix64 — a tiny, well-studied mixing function with
//! 64-bit state and full-period output, more than adequate for dropout masks
//! and weight initialization.

use crate::error::{Error, Result};

const GOLDEN: u64 = 0x9e3779b97f4a7c15;

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Seed holder; cheap to copy. Derive independent [`Stream`]s by address.
#[derive(Debug, Clone, Copy)]
pub struct RandomSource {
    seed: u64,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        RandomSource { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive the stream addressed by `tags` (e.g. `[epoch, sample]` or
    /// `[epoch, sample, layer]`). The same `(seed, tags)` always yields the
    /// same stream; distinct tags yield statistically independent streams.
    pub fn stream(&self, tags: &[u64]) -> Stream {
        let mut state = self.seed ^ 0x6c62272e07bb0142;
        for &t in tags {
            // Mix each tag through the full avalanche so that nearby
            // addresses (epoch e vs e+1) decorrelate.
            let mut s = state ^ t.wrapping_mul(GOLDEN);
            state = splitmix64(&mut s);
        }
        Stream {
            state,
            spare_gauss: None,
        }
    }
}

/// Sequential pseudo-random stream produced by [`RandomSource::stream`].
#[derive(Debug, Clone)]
pub struct Stream {
    state: u64,
    spare_gauss: Option<f64>,
}

impl Stream {
    pub fn next_u64(&mut self) -> u64 {
        splitmix64(&mut self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n).
    pub fn next_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Multiply-shift bounded sampling; bias is negligible for n << 2^64.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box–Muller (caches the spare deviate).
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(g) = self.spare_gauss.take() {
            return g;
        }
        loop {
            let u = self.next_f64();
            let v = self.next_f64();
            if u > 0.0 {
                let r = (-2.0 * u.ln()).sqrt();
                let theta = 2.0 * std::f64::consts::PI * v;
                self.spare_gauss = Some(r * theta.sin());
                return r * theta.cos();
            }
        }
    }

    /// Deterministic Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_index(i + 1);
            xs.swap(i, j);
        }
    }
}

/// Independent Bernoulli(keep_prob) mask of length `d`: `true` = keep.
pub fn bernoulli_mask(stream: &mut Stream, d: usize, keep_prob: f64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&keep_prob) {
        return Err(Error::InvalidArgument(format!(
            "bernoulli_mask: keep_prob={keep_prob} outside [0,1]"
        )));
    }
    Ok((0..d).map(|_| stream.next_f64() < keep_prob).collect())
}
