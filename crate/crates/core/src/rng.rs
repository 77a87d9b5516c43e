//! Reproducible randomness.
//!
//! The generator is xoshiro256** seeded through SplitMix64
//! (`Xoshiro256StarStar::seed_from_u64`). Derived draws are defined here so
//! that other implementations can reproduce them exactly:
//!
//! * `uniform`: `(next_u64 >> 11) * 2^-53`, in `[0, 1)`.
//! * `below(n)`: high 64 bits of `next_u64 * n` (128-bit product).
//! * `gaussian`: Box–Muller on two uniforms `u1, u2` with `u1` replaced by
//!   `1 - u1` so it lies in `(0, 1]`; yields `r·cos θ` then `r·sin θ`.
//! * `shuffle`: Fisher–Yates from the last index down, swapping `i` with
//!   `below(i + 1)`.

use std::hash::Hasher;

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

#[derive(Clone, Debug)]
pub struct Rng {
    inner: Xoshiro256StarStar,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn gaussian_vec(&mut self, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| self.gaussian() * scale).collect()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// 64-bit FNV-1a of the UTF-8 bytes of `s`.
pub fn fnv1a64(s: &str) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(s.as_bytes());
    h.finish()
}
