//! Toy training data: Gaussian mixtures per condition, or a standard normal
//! cloud for the relational task.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;

use super::config::{DataMode, ExperimentConfig, Task};
use crate::denoiser::{Condition, StateVector};
use crate::error::{Error, Result};
use crate::rng::{self, SimRng};

/// Draws one point from an isotropic Gaussian mixture.
pub fn sample_mixture(modes: &[DataMode], rng: &mut SimRng) -> Result<StateVector> {
    let weights = WeightedIndex::new(modes.iter().map(|m| m.weight))
        .map_err(|e| Error::Invalid(format!("bad mixture weights: {e}")))?;
    let m = &modes[weights.sample(rng)];
    let z = rng::gaussian(rng, m.mean.len());
    Ok(StateVector::new(m.mean.iter().zip(z.as_slice()).map(|(mu, e)| mu + m.std * e).collect()))
}

/// `dataset.size` points with conditions assigned round-robin.
pub fn generate_dataset(cfg: &ExperimentConfig, rng: &mut SimRng) -> Result<Vec<(StateVector, Condition)>> {
    (0..cfg.dataset_size)
        .map(|i| {
            let c = i % cfg.conditions;
            let x = match cfg.task {
                Task::Modes => {
                    let modes =
                        cfg.modes.get(&c).ok_or_else(|| Error::Invalid(format!("condition {c} has no modes")))?;
                    sample_mixture(modes, rng)?
                }
                Task::Relational => rng::gaussian(rng, cfg.dim),
            };
            Ok((x, Condition::Class(c)))
        })
        .collect()
}
