use std::collections::BTreeMap;

use super::{NumError, Tensor};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Per-parameter moment estimates with bias correction.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update of every named parameter. Every parameter needs a gradient
    /// of its own shape in `grads`; nothing is modified otherwise.
    pub fn step(
        &mut self,
        params: &mut [(&str, &mut Tensor)],
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<(), NumError> {
        for (name, p) in params.iter() {
            let g = grads.get(*name).ok_or_else(|| NumError::MissingGradient(name.to_string()))?;
            if g.shape() != p.shape() {
                return Err(NumError::Shape(format!(
                    "gradient for {name} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let t = self.step as f64;
        let c1 = 1.0 - beta1.powf(t);
        let c2 = 1.0 - beta2.powf(t);
        for (name, p) in params.iter_mut() {
            let g = &grads[*name];
            let m = self.first.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.second.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
            let iter = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((w, &gi), (mi, vi)) in iter {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
