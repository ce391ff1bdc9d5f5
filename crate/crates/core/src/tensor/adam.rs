//! Adam optimizer with bias correction.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Parameter("learning_rate must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Parameter(format!("{name} must be in (0,1), got {b}")));
            }
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Parameter("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Per-parameter first/second moment estimates plus the shared step count.
pub struct AdamState {
    config: AdamConfig,
    step_count: u64,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> AdamState {
        AdamState {
            config,
            step_count: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// One Adam update over named parameters. Parameters without an
    /// accumulated gradient are treated as having zero gradient. Clears the
    /// gradients it consumes.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a Tensor)>,
    {
        self.config.validate()?;
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, p) in params {
            let grad = p.grad().unwrap_or_else(|| vec![0.0; p.len()]);
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Optimizer(format!(
                    "non-finite gradient for parameter '{name}'"
                )));
            }
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            if m.len() != grad.len() {
                return Err(Error::Optimizer(format!(
                    "moment shape mismatch for parameter '{name}'"
                )));
            }
            let mut values = p.to_vec();
            for i in 0..grad.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
            p.set_values(values);
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{scale, sum};

    fn one_param(value: f64) -> Tensor {
        Tensor::param(&[1], vec![value])
    }

    #[test]
    fn first_step_moves_by_lr() {
        let p = one_param(0.0);
        // loss = p  => grad = 1
        sum(&p).backward().unwrap();
        let mut state = AdamState::new(AdamConfig::default());
        state.step([("p", &p)]).unwrap();
        assert!((p.to_vec()[0] + 0.001).abs() < 1e-6);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let p = one_param(1.5);
        sum(&scale(&p, 0.0)).backward().unwrap();
        let mut state = AdamState::new(AdamConfig::default());
        state.step([("p", &p)]).unwrap();
        assert_eq!(p.to_vec()[0], 1.5);
    }

    #[test]
    fn constant_gradient_matches_hand_recurrence() {
        // g = 1 each step: m_t and v_t follow the Adam recurrences exactly.
        let c = AdamConfig::default();
        let p = one_param(0.0);
        let mut state = AdamState::new(c);
        let mut expected = 0.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            sum(&p).backward().unwrap();
            state.step([("p", &p)]).unwrap();
            m = c.beta1 * m + (1.0 - c.beta1);
            v = c.beta2 * v + (1.0 - c.beta2);
            let m_hat = m / (1.0 - c.beta1.powi(t));
            let v_hat = v / (1.0 - c.beta2.powi(t));
            expected -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            assert!((p.to_vec()[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let p = one_param(0.0);
        p.set_values(vec![0.0]);
        // force a NaN gradient by hand
        sum(&scale(&p, f64::NAN)).backward().unwrap();
        let mut state = AdamState::new(AdamConfig::default());
        let err = state.step([("conv1.weight", &p)]).unwrap_err();
        assert!(err.to_string().contains("conv1.weight"));
    }
}
