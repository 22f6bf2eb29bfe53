//! Plain SGD with a step learning-rate schedule.

use super::{Scalar, Tensor};
use crate::error::{Result, SydError};

/// Optimizer state: base rate decayed by `decay_factor` every `step_epochs`.
#[derive(Clone, Copy, Debug)]
pub struct SgdState {
    pub learning_rate: f64,
    pub step_epochs: usize,
    pub decay_factor: f64,
    pub epoch: usize,
}

impl SgdState {
    pub fn new(learning_rate: f64, step_epochs: usize, decay_factor: f64) -> Self {
        Self {
            learning_rate,
            step_epochs,
            decay_factor,
            epoch: 0,
        }
    }

    /// learning_rate * decay_factor^floor(epoch / step_epochs).
    ///
    /// Computed by repeated division with the reciprocal so that decimal
    /// schedules land on the exact decimal values (0.007 -> 0.0007 -> 7e-5),
    /// which direct `powi` multiplication does not.
    pub fn effective_lr(&self) -> f64 {
        let steps = self.epoch / self.step_epochs;
        let reciprocal = 1.0 / self.decay_factor;
        let mut lr = self.learning_rate;
        for _ in 0..steps {
            lr /= reciprocal;
        }
        lr
    }

    /// In-place step p <- p - effective_lr * g over named parameters.
    /// Gradients are consumed (cleared) by the step.
    pub fn step<T: Scalar>(&self, params: &mut [(&str, &mut Tensor<T>)]) -> Result<()> {
        let lr = T::from_f64(self.effective_lr());
        for (name, p) in params.iter_mut() {
            let grad = p.grad().ok_or_else(|| SydError::MissingGradient {
                param: (*name).to_string(),
            })?;
            let updated: Vec<T> = p
                .data()
                .iter()
                .zip(grad)
                .map(|(&v, &g)| v - lr * g)
                .collect();
            p.data_mut().copy_from_slice(&updated);
            p.clear_grad();
        }
        Ok(())
    }
}
