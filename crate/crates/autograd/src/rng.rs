//! Reproducible random streams.
//!
//! Every stream is a ChaCha8 generator (`rand_chacha`) seeded through
//! `SeedableRng::seed_from_u64`, whose seed expansion is fixed by
//! `rand_core`. ChaCha output is specified bit-for-bit, so a given seed
//! yields the same sequence on every platform. Child streams are keyed by
//! mixing the parent seed with a caller-chosen label through SplitMix64.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit label for a string key (FNV-1a).
pub fn label_of(key: &str) -> u64 {
    key.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent stream determined only by this stream's seed and `label`.
    pub fn derive(&self, label: u64) -> Self {
        Self::new(splitmix64(self.seed ^ splitmix64(label)))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// Draws from the symmetric `Beta(alpha, alpha)` distribution, clamped
    /// into the open interval `(0, 1)`.
    pub fn beta(&mut self, alpha: f64) -> Result<f64> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidArgument(format!("Beta parameter must be positive, got {alpha}")));
        }
        let dist = Beta::new(alpha, alpha)
            .map_err(|e| Error::InvalidArgument(format!("Beta({alpha}, {alpha}): {e}")))?;
        let x: f64 = dist.sample(&mut self.rng);
        Ok(x.clamp(1e-12, 1.0 - 1e-12))
    }

    /// A uniformly random permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(&mut self.rng);
        p
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.rng, n, k.min(n)).into_vec()
    }
}

/// Free-function form of [`RngStream::beta`].
pub fn sample_beta(alpha: f64, rng: &mut RngStream) -> Result<f64> {
    rng.beta(alpha)
}
