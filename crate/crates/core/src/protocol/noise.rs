use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mask half-width used when none is configured.
pub const DEFAULT_NOISE_SCALE: f64 = 100.0;

/// Noise configuration shared by every node of a federation.
///
/// Each node draws its masks from its own stream, derived from the master
/// seed, the row band, its node number and the evaluation id, so masks are
/// fresh per evaluation and independent of message timing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseLedger {
    /// Half-width `S` of the `Uniform(−S, S)` mask entries. Zero disables masking.
    pub scale: f64,
    pub seed: u64,
}

impl NoiseLedger {
    pub fn new(scale: f64, seed: u64) -> Result<Self> {
        if !scale.is_finite() || scale < 0.0 {
            return Err(Error::Domain(format!("noise scale must be finite and >= 0, got {scale}")));
        }
        Ok(Self { scale, seed })
    }

    /// Zero noise: every mask is the zero matrix.
    pub fn disabled(seed: u64) -> Self {
        Self { scale: 0.0, seed }
    }

    /// Mask stream for `node` (0 = central) within `band` for one evaluation.
    pub fn source(&self, band: u32, node: u32, eval_id: u64) -> NoiseSource {
        let seed = derive_seed(&[self.seed, band as u64, node as u64, eval_id]);
        NoiseSource { rng: ChaCha20Rng::seed_from_u64(seed), scale: self.scale }
    }
}

/// Deterministic seed mixing (SplitMix64 finalizer folded over the parts).
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6a09_e667_f3bc_c908_u64, |acc, &p| splitmix(acc ^ splitmix(p)))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One node's random stream for one evaluation.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    rng: ChaCha20Rng,
    scale: f64,
}

impl NoiseSource {
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// `rows × cols` matrix with i.i.d. `Uniform(−S, S)` entries.
    pub fn matrix(&mut self, rows: usize, cols: usize) -> DMatrix<f64> {
        if self.scale == 0.0 {
            return DMatrix::zeros(rows, cols);
        }
        let s = self.scale;
        DMatrix::from_fn(rows, cols, |_, _| self.rng.random_range(-s..s))
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }
}
