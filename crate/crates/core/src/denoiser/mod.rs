//! The noise-prediction policy and its training machinery.

mod constant;
mod mlp;
mod optim;
mod pretrain;

use std::fmt;
use std::ops::Index;

use serde::{Deserialize, Serialize};

pub use constant::ConstantNoise;
pub use mlp::{time_embedding, DenoiserParams, NamedTensor, NetworkSpec};
pub use optim::{adam_update, OptimizerConfig, OptimizerState};
pub use pretrain::{pretrain, pretrain_step, PretrainConfig};

/// A point in data space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateVector(Vec<f64>);

impl StateVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self(self.0.iter().map(|v| v * k).collect())
    }

    /// `self + k * other`
    pub fn add_scaled(&self, other: &StateVector, k: f64) -> Self {
        debug_assert_eq!(self.dim(), other.dim());
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a + k * b).collect())
    }

    pub fn sub(&self, other: &StateVector) -> Self {
        self.add_scaled(other, -1.0)
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn dist_sq(&self, other: &StateVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).powi(2)).sum()
    }
}

impl Index<usize> for StateVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl From<Vec<f64>> for StateVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// What the model is asked to generate. `Null` is the unconditional branch of
/// classifier-free guidance and embeds as all zeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    Class(usize),
    Null,
}

impl Condition {
    pub fn embed_into(&self, num_classes: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), num_classes);
        out.fill(0.0);
        if let Condition::Class(id) = *self {
            assert!(id < num_classes, "class {id} out of range for {num_classes} classes");
            out[id] = 1.0;
        }
    }

    pub fn class_id(&self) -> Option<usize> {
        match self {
            Condition::Class(id) => Some(*id),
            Condition::Null => None,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Class(id) => write!(f, "{id}"),
            Condition::Null => write!(f, "null"),
        }
    }
}

/// Name and length of one trainable tensor inside a flat gradient vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSlot {
    pub name: String,
    pub len: usize,
}

/// Gradients for the trainable parameters of a model, flattened in the order
/// given by [`NoiseModel::trainable_layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients(Vec<f64>);

impl ParamGradients {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn axpy(&mut self, k: f64, other: &ParamGradients) {
        assert_eq!(self.len(), other.len(), "gradient layout mismatch");
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += k * b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.0.iter_mut().for_each(|v| *v *= k);
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// A conditional noise predictor `eps(x, c, t)` with analytic parameter
/// gradients. Samplers and RL objectives are generic over this trait.
pub trait NoiseModel: Sync {
    fn dim(&self) -> usize;

    fn num_steps(&self) -> usize;

    fn predict_noise(&self, x: &StateVector, c: Condition, t: usize) -> StateVector;

    /// Gradient of `<predict_noise(x, c, t), upstream>` with respect to every
    /// trainable parameter.
    fn backprop(&self, x: &StateVector, c: Condition, t: usize, upstream: &StateVector) -> ParamGradients;

    fn trainable_layout(&self) -> Vec<TensorSlot>;

    fn visit_trainable(&self, f: &mut dyn FnMut(&[f64]));

    fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn num_trainable(&self) -> usize {
        self.trainable_layout().iter().map(|s| s.len).sum()
    }

    fn trainable_vector(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_trainable());
        self.visit_trainable(&mut |s| out.extend_from_slice(s));
        out
    }

    fn set_trainable_vector(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.num_trainable(), "trainable length mismatch");
        let mut offset = 0;
        self.visit_trainable_mut(&mut |s| {
            s.copy_from_slice(&values[offset..offset + s.len()]);
            offset += s.len();
        });
    }
}
