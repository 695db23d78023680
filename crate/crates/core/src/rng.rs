//! Reproducible random streams for simulation.
//!
//! Each stream is a ChaCha20 generator; normals use the inverse-CDF method
//! so that a given seed yields the same draws on every platform.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};

use crate::special::inv_norm_cdf;

/// Version tag of the stream construction; bump if draws change.
pub const STREAM_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct NormalStream {
    rng: ChaCha20Rng,
}

impl NormalStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream `index` derived from a base seed (`base ^ index`).
    pub fn for_replication(base_seed: u64, index: u64) -> Self {
        Self::new(base_seed ^ index)
    }

    /// Uniform on the open interval `(0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        inv_norm_cdf(self.uniform())
    }
}
