//! Seeded randomness.
//!
//! Uniform bits come from ChaCha8 (`rand_chacha`), whose output is fixed by
//! its specification and identical on every platform. Normal deviates use the
//! Box–Muller transform on two open-interval uniforms, `u1, u2 ∈ (0, 1)`:
//!
//! ```text
//! r = sqrt(-2 ln u1),  z0 = r cos(2π u2),  z1 = r sin(2π u2)
//! ```
//!
//! `z0` is returned first and `z1` is cached for the next call, so a given
//! seed and call sequence always yields the same stream.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
    seed: u64,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
            seed,
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent generator on ChaCha stream `stream` of the same seed.
    ///
    /// Use this to hand separate streams to concurrent consumers; the parent
    /// is left untouched.
    pub fn split(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Self {
            inner,
            seed: self.seed,
            spare: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on the open interval (0, 1) with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n` (Lemire's widening multiply, no modulo bias
    /// beyond 2^-64).
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }

    /// Fisher–Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }
}

/// I.i.d. draws from `N(mean, std²)` in row-major order.
pub fn gaussian_sample(rng: &mut Rng, shape: &[usize], mean: f64, std: f64) -> Result<Tensor> {
    if !(std >= 0.0) || !mean.is_finite() || !std.is_finite() {
        return Err(Error::invalid(format!(
            "gaussian_sample needs finite mean and std >= 0, got mean={mean}, std={std}"
        )));
    }
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| mean + std * rng.normal()).collect();
    Tensor::new(shape.to_vec(), data)
}
