use super::{Condition, NoiseModel, ParamGradients, StateVector, TensorSlot};

/// Predicts a fixed vector per branch regardless of state and time. Under
/// this model DDIM inversion is the exact inverse of deterministic denoising.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantNoise {
    pub conditional: StateVector,
    pub unconditional: StateVector,
    pub num_steps: usize,
}

impl NoiseModel for ConstantNoise {
    fn dim(&self) -> usize {
        self.conditional.dim()
    }

    fn num_steps(&self) -> usize {
        self.num_steps
    }

    fn predict_noise(&self, _: &StateVector, c: Condition, _: usize) -> StateVector {
        match c {
            Condition::Null => self.unconditional.clone(),
            Condition::Class(_) => self.conditional.clone(),
        }
    }

    fn backprop(&self, _: &StateVector, _: Condition, _: usize, _: &StateVector) -> ParamGradients {
        ParamGradients::zeros(0)
    }

    fn trainable_layout(&self) -> Vec<TensorSlot> {
        Vec::new()
    }

    fn visit_trainable(&self, _: &mut dyn FnMut(&[f64])) {}

    fn visit_trainable_mut(&mut self, _: &mut dyn FnMut(&mut [f64])) {}
}
