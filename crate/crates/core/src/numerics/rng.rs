//! Deterministic random streams and Gaussian sampling.
//!
//! Every stream is a ChaCha20 keystream keyed by `(master_seed, stream_index)`.
//! The 64-bit stream index selects one of 2^64 independent keystreams for the
//! same key, so ensemble members, observation means and initial conditions each
//! draw from their own stream regardless of how work is scheduled.
//!
//! Uniforms take the top 53 bits of one `u64` output. Normals use the
//! Box–Muller transform: two uniforms are consumed in order `(u1, u2)`, with
//! `u1` mapped to `(0, 1]` for the radius, and the pair yields
//! `r·cos(2π·u2)` first and `r·sin(2π·u2)` on the next request.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};

pub const ALGORITHM_ID: &str = "chacha20-boxmuller/v1";

/// Purpose tag occupying the top byte of a stream index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum StreamPurpose {
    InitialCondition = 1,
    ObservationMean = 2,
    LargeEnsembleMember = 3,
    SmallEnsembleMember = 4,
    NetworkInit = 5,
    Shuffle = 6,
    Scratch = 7,
}

/// Packs `(purpose, trajectory, member)` into a stream index.
///
/// Layout: bits 56..64 purpose, 24..56 trajectory, 0..24 member.
pub fn stream_index(purpose: StreamPurpose, trajectory: usize, member: usize) -> u64 {
    debug_assert!(trajectory < (1 << 32) && member < (1 << 24));
    ((purpose as u64) << 56) | ((trajectory as u64 & 0xFFFF_FFFF) << 24) | (member as u64 & 0xFF_FFFF)
}

#[derive(Clone)]
pub struct RngStream {
    master_seed: u64,
    stream_index: u64,
    inner: ChaCha20Rng,
    spare_normal: Option<f64>,
}

impl std::fmt::Debug for RngStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RngStream")
            .field("algorithm_id", &ALGORITHM_ID)
            .field("master_seed", &self.master_seed)
            .field("stream_index", &self.stream_index)
            .finish()
    }
}

impl RngStream {
    pub fn new(master_seed: u64, stream_index: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(master_seed);
        inner.set_stream(stream_index);
        Self {
            master_seed,
            stream_index,
            inner,
            spare_normal: None,
        }
    }

    pub fn for_purpose(master_seed: u64, purpose: StreamPurpose, trajectory: usize, member: usize) -> Self {
        Self::new(master_seed, stream_index(purpose, trajectory, member))
    }

    pub fn algorithm_id(&self) -> &'static str {
        ALGORITHM_ID
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_index(&self) -> u64 {
        self.stream_index
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer on `0..n`, by rejection sampling.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// Isotropic Gaussian `N(mean, A·I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSpec {
    pub mean: Vec<f64>,
    pub covariance_magnitude: f64,
}

impl GaussianSpec {
    pub fn new(mean: Vec<f64>, covariance_magnitude: f64) -> Result<Self> {
        if !(covariance_magnitude >= 0.0 && covariance_magnitude.is_finite()) {
            return Err(Error::contract(format!(
                "covariance magnitude must be finite and >= 0, got {covariance_magnitude}"
            )));
        }
        Ok(Self {
            mean,
            covariance_magnitude,
        })
    }

    pub fn centered(dim: usize, covariance_magnitude: f64) -> Result<Self> {
        Self::new(vec![0.0; dim], covariance_magnitude)
    }
}

/// Draws `mean + sqrt(A)·z` with `z` standard normal, one component at a time.
pub fn gaussian_sample(rng: &mut RngStream, spec: &GaussianSpec, dim: usize) -> Result<Vec<f64>> {
    if dim != spec.mean.len() {
        return Err(Error::contract(format!(
            "gaussian_sample: dim {dim} does not match mean length {}",
            spec.mean.len()
        )));
    }
    let scale = spec.covariance_magnitude.sqrt();
    Ok(spec.mean.iter().map(|&m| m + scale * rng.standard_normal()).collect())
}
