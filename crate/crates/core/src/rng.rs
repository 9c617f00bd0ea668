//! Seeded random streams.
//!
//! Every source of randomness in a run (data generation, task split, label
//! noise, weight init, batching, action sampling, pretraining) draws from
//! its own ChaCha stream keyed by the run seed, so changing how much one
//! consumer draws never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RunRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Split = 2,
    Noise = 3,
    Init = 4,
    Batch = 5,
    Sampling = 6,
    Pretrain = 7,
}

/// Independent generator for `stream` under `seed`.
pub fn stream(seed: u64, stream: Stream) -> RunRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Inverse-CDF draw from a categorical distribution.
///
/// Falls back to the last index with non-zero mass when rounding leaves the
/// cumulative sum a hair below `u`.
pub fn sample_categorical<R: rand::Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return k;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}
