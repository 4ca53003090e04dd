//! Self-reflective reinforcement learning for small conditional diffusion
//! models.
//!
//! A conditional MLP noise predictor is pretrained on a toy dataset, then
//! fine-tuned with a clipped policy-gradient objective on multi-round
//! reflection chains: denoise, invert at a lower guidance scale, denoise
//! again. Rewards come from analytic oracles.

pub mod denoiser;
pub mod error;
pub mod harness;
pub mod par;
pub mod rl;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod srrl;
pub mod stats;

pub use denoiser::{Condition, DenoiserParams, NetworkSpec, NoiseModel, ParamGradients, StateVector};
pub use error::{Error, Result};
pub use par::Execution;
pub use schedule::{NoiseSchedule, ScheduleSpec};
