//! Seeded random streams.
//!
//! Every rollout draws from its own ChaCha8 stream whose seed is derived from
//! the master seed and a path of integers such as
//! `(step, prompt, MAIN, trajectory)`. Two runs that agree on the path agree
//! on every draw, no matter how many other streams were consumed in between
//! or in what order workers ran.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Stream tag for root (main-chain) rollouts.
pub const MAIN: u64 = 0x4d41_494e;
/// Stream tag for auxiliary branches.
pub const AUX: u64 = 0x0041_5558;
/// Stream tag for pivot draws.
pub const PIVOT: u64 = 0x5049_564f;
/// Stream tag for evaluation rollouts.
pub const EVAL: u64 = 0x4556_414c;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn substream(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}

/// A source of uniforms in `[0, 1)`.
///
/// Sampling routines take this instead of an `Rng` so tests can replay a
/// scripted sequence and observe exhaustion.
pub trait UniformSource {
    fn next_uniform(&mut self) -> Result<f64>;
}

impl<R: RngCore> UniformSource for R {
    fn next_uniform(&mut self) -> Result<f64> {
        Ok(self.gen::<f64>())
    }
}

/// Replays a fixed list of uniforms, then fails.
#[derive(Debug, Clone)]
pub struct ScriptedUniforms {
    values: Vec<f64>,
    pos: usize,
}

impl ScriptedUniforms {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values, pos: 0 }
    }

    pub fn consumed(&self) -> usize {
        self.pos
    }
}

impl UniformSource for ScriptedUniforms {
    fn next_uniform(&mut self) -> Result<f64> {
        let v = *self
            .values
            .get(self.pos)
            .ok_or(Error::RngExhausted(self.pos))?;
        self.pos += 1;
        Ok(v)
    }
}

/// Inverse-CDF categorical draw. Falls back to the last index with positive
/// mass when rounding leaves `u` above the final cumulative sum.
pub fn categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}
