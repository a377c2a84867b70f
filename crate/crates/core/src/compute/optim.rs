use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::error::{Error, Result};

/// Adaptive-moment optimizer with bias-corrected first and second moments.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl Adam {
    /// Applies one update to every parameter of `set` and clears gradients.
    ///
    /// Fails without touching anything if any parameter lacks a gradient.
    pub fn step(&self, set: &mut ParamSet) -> Result<()> {
        if let Some(p) = set.iter().find(|p| p.tensor.grad().is_none()) {
            return Err(Error::MissingGradient(format!("{}.{}", set.tag(), p.name)));
        }
        for p in set.iter_mut() {
            let grad = p.tensor.take_grad().expect("checked above");
            p.step_counter += 1;
            let t = p.step_counter as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let values = p.tensor.values_mut();
            for (((w, g), m), v) in values
                .iter_mut()
                .zip(&grad)
                .zip(p.first_moment.iter_mut())
                .zip(p.second_moment.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
