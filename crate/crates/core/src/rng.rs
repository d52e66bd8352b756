//! Seedable, splittable random streams.
//!
//! Every stream is a ChaCha8 block cipher run in counter mode. The 64-bit
//! seed is expanded into the 256-bit key with `SeedableRng::seed_from_u64`
//! and the stream index selects one of the 2^64 independent ChaCha nonces.
//! The generator identity is fixed (`rand_chacha::ChaCha8Rng`, pinned
//! through `Cargo.lock`), so traces replay bit-for-bit across builds.

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RngError {
    #[error("cannot draw {r} items without replacement from {n}")]
    SampleTooLarge { n: usize, r: usize },
    #[error("invalid distribution parameter: {0}")]
    BadParameter(String),
}

/// One reproducible random stream, identified by `(seed, stream)`.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    /// Stream used by replicate `r` of an experiment with base seed `base`.
    pub fn for_replicate(base: u64, r: u64) -> Self {
        Self::new(base.wrapping_add(r), 0)
    }

    /// A sibling stream: same seed, different stream index.
    pub fn split(&self, stream: u64) -> Self {
        Self::new(self.seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Uniform draw on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn sample_uniform_int(&mut self, q: usize) -> usize {
        self.inner.random_range(0..q)
    }

    pub fn sample_normal(&mut self, mu: f64, var: f64) -> Result<f64, RngError> {
        if !(var >= 0.0) || !var.is_finite() || !mu.is_finite() {
            return Err(RngError::BadParameter(format!("normal({mu}, {var})")));
        }
        let d = Normal::new(mu, var.sqrt()).map_err(|e| RngError::BadParameter(e.to_string()))?;
        Ok(d.sample(&mut self.inner))
    }

    /// Standard normal draw.
    pub fn std_normal(&mut self) -> f64 {
        self.inner.sample(rand_distr::StandardNormal)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// `Bin(n, p)`; the degenerate cases `p = 0` and `p = 1` consume no randomness.
    pub fn sample_binomial(&mut self, n: usize, p: f64) -> Result<usize, RngError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(RngError::BadParameter(format!("binomial p = {p}")));
        }
        if p == 1.0 {
            return Ok(n);
        }
        if p == 0.0 || n == 0 {
            return Ok(0);
        }
        let d = Binomial::new(n as u64, p).map_err(|e| RngError::BadParameter(e.to_string()))?;
        Ok(d.sample(&mut self.inner) as usize)
    }

    /// Uniformly random size-`r` subset of `0..n`, returned in ascending order.
    pub fn sample_without_replacement(&mut self, n: usize, r: usize) -> Result<Vec<usize>, RngError> {
        if r > n {
            return Err(RngError::SampleTooLarge { n, r });
        }
        if r == n {
            return Ok((0..n).collect());
        }
        let mut v = index::sample(&mut self.inner, n, r).into_vec();
        v.sort_unstable();
        Ok(v)
    }

    /// Categorical draw from (not necessarily normalized) weights.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (q, &w) in weights.iter().enumerate() {
            if u < w {
                return q;
            }
            u -= w;
        }
        // rounding fell off the end: last category with positive weight
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
