use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one moment pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        for (k, (p, g)) in params.iter().zip(&grads).enumerate() {
            if p.len() != g.len() || self.first.get(k).map(Vec::len) != Some(p.len()) {
                return Err(Error::Shape(format!("tensor {k}: parameter/gradient/moment sizes differ")));
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= learning_rate * mhat / (vhat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut adam = AdamState::new(AdamConfig::default());
        let mut p = vec![1.0, -2.0, 0.5];
        let g = vec![3.0, -0.01, 1e3];
        adam.step(vec![&mut p], vec![&g]).unwrap();
        let moved = [1.0 - p[0], -2.0 - p[1], 0.5 - p[2]];
        for (d, gi) in moved.iter().zip(&g) {
            assert!((d.abs() - 1e-4).abs() < 1e-8, "{d}");
            assert_eq!(d.signum(), gi.signum());
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut adam = AdamState::new(AdamConfig::default());
        let mut p = vec![0.3, -0.7];
        for _ in 0..50 {
            adam.step(vec![&mut p], vec![&[0.0, 0.0]]).unwrap();
        }
        assert_eq!(p, vec![0.3, -0.7]);
        assert_eq!(adam.steps(), 50);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut adam = AdamState::new(AdamConfig::default());
        let mut p = vec![0.0; 2];
        assert!(adam.step(vec![&mut p], vec![&[1.0]]).is_err());
    }
}
