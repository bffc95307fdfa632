use super::Tensor;
use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Moment accumulators for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, config: AdamConfig) -> Self {
        let (first, second) = params
            .into_iter()
            .map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()]))
            .unzip();
        Self { config, step: 0, first, second }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Resets the accumulators of parameter `i`, e.g. after its shape changed.
    pub fn reset_slot(&mut self, i: usize, numel: usize) {
        self.first[i] = vec![0.0; numel];
        self.second[i] = vec![0.0; numel];
    }

    /// One bias-corrected Adam update of every parameter.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(contract(format!(
                "adam tracks {} parameters, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.len() || p.numel() != self.first[i].len() {
                return Err(contract(format!("adam slot {i}: shape mismatch")));
            }
        }
        if !(lr > 0.0) {
            return Err(contract("learning rate must be positive"));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.iter()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
