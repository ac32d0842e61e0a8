//! Deterministic, seedable randomness with labeled substreams.
//!
//! One [`RandomSource`] wraps a ChaCha8 stream. Independent child streams are
//! derived from the parent's *seed identity* (not its position) by hashing
//! `parent_seed || '/' || label` with SHA-256, so derivation commutes with
//! drawing and distinct labels give distinct streams.
//!
//! Gaussian variates use the classic Box-Muller transform: two 64-bit draws
//! become `u1 in (0,1]`, `u2 in [0,1)` and the value is
//! `sqrt(-2 ln u1) * cos(2 pi u2)`. The sine branch is discarded so the
//! stream position is the only state a checkpoint has to record.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Recorded in every artifact that embeds generator state.
pub const ALGORITHM_ID: &str = "chacha8-boxmuller-v1";

const STATE_LEN: usize = 48;

#[derive(Debug, Error)]
#[error("invalid random source state: {0}")]
pub struct RngStateError(&'static str);

/// Deterministic random stream; cloning forks the exact state.
#[derive(Clone)]
pub struct RandomSource {
    seed: [u8; 32],
    rng: ChaCha8Rng,
}

impl RandomSource {
    /// Root stream of a run, fully determined by the master seed.
    pub fn from_master(master_seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"random-source-v1");
        h.update(master_seed.to_le_bytes());
        let seed: [u8; 32] = h.finalize().into();
        RandomSource {
            seed,
            rng: ChaCha8Rng::from_seed(seed),
        }
    }

    /// Independent child stream named by `label`.
    pub fn derive(&self, label: &str) -> Self {
        let mut h = Sha256::new();
        h.update(self.seed);
        h.update(b"/");
        h.update(label.as_bytes());
        let seed: [u8; 32] = h.finalize().into();
        RandomSource {
            seed,
            rng: ChaCha8Rng::from_seed(seed),
        }
    }

    pub fn algorithm(&self) -> &'static str {
        ALGORITHM_ID
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform index in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index() over an empty range");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal variate (Box-Muller, cosine branch).
    pub fn normal(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.normal();
        }
    }

    /// Serialized state: 32-byte seed plus 16-byte stream position.
    pub fn state_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(STATE_LEN);
        out.extend_from_slice(&self.seed);
        out.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        out
    }

    pub fn restore(bytes: &[u8]) -> Result<Self, RngStateError> {
        if bytes.len() != STATE_LEN {
            return Err(RngStateError("wrong length"));
        }
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&bytes[..32]);
        let mut pos = [0u8; 16];
        pos.copy_from_slice(&bytes[32..]);
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(u128::from_le_bytes(pos));
        Ok(RandomSource { seed, rng })
    }
}
