//! Seeded randomness with per-index stream splitting.
//!
//! A run owns one master seed. Each batch draws a fresh 64-bit batch seed from
//! the master generator, and sample `i` of that batch uses ChaCha8 keyed by the
//! batch seed on stream `i`. Results therefore do not depend on how samples are
//! scheduled across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::denoiser::StateVector;

pub type SimRng = ChaCha8Rng;

pub fn master(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(batch_seed: u64, index: usize) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
    rng.set_stream(index as u64);
    rng
}

pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> StateVector {
    StateVector::new((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
}
