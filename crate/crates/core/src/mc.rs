//! Chunked Monte Carlo evaluation with per-chunk RNG streams.
//!
//! Chunk `c` always draws from `ChaCha8Rng::seed_from_u64(seed)` on stream
//! `c`, and results are reduced in chunk order, so the output does not depend
//! on whether the `parallel` feature is enabled or how many threads run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::Serialize;

pub const DEFAULT_CHUNK: usize = 4096;

/// Welford accumulator for the sample mean and its standard error.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    n: usize,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        let mut s = Self::new();
        for &x in xs {
            s.push(x);
        }
        s
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Pairwise combination of two disjoint sample sets.
    pub fn merge(&mut self, other: &RunningStats) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        self.mean += delta * other.n as f64 / n as f64;
        self.m2 += other.m2 + delta * delta * (self.n as f64 * other.n as f64) / n as f64;
        self.n = n;
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero for fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn std_error(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }

    pub fn estimate(&self) -> McEstimate {
        McEstimate {
            mean: self.mean,
            se: self.std_error(),
            n: self.n,
        }
    }
}

/// A Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

/// Root-sum-square of independent standard errors.
pub fn combined_se(ses: &[f64]) -> f64 {
    ses.iter().map(|s| s * s).sum::<f64>().sqrt()
}

/// Splits `n` draws into chunks of at most `chunk` and evaluates `f(len, rng)`
/// on each, returning results in chunk order.
pub fn map_chunks<T, E, F>(n: usize, chunk: usize, seed: u64, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize, &mut ChaCha8Rng) -> Result<T, E> + Sync + Send,
{
    let chunk = chunk.max(1);
    let n_chunks = n.div_ceil(chunk);
    let run = |c: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        let len = chunk.min(n - c * chunk);
        f(len, &mut rng)
    };
    #[cfg(feature = "parallel")]
    {
        (0..n_chunks).into_par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n_chunks).map(run).collect()
    }
}

/// Same as [`map_chunks`] but with every chunk evaluated on the calling thread.
pub fn map_chunks_sequential<T, E, F>(n: usize, chunk: usize, seed: u64, f: F) -> Result<Vec<T>, E>
where
    F: Fn(usize, &mut ChaCha8Rng) -> Result<T, E>,
{
    let chunk = chunk.max(1);
    (0..n.div_ceil(chunk))
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            f(chunk.min(n - c * chunk), &mut rng)
        })
        .collect()
}

/// Derives an independent seed for a named sub-computation.
pub fn subseed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
