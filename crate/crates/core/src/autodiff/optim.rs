use crate::error::{Error, Result};

use super::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .iter()
            .map(|(_, p)| vec![0.0; p.value.numel()])
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter, then zeroes the gradients.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if let Some((_, p)) = params
            .iter()
            .find(|(_, p)| p.requires_grad && p.grad.is_none())
        {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            if !p.requires_grad {
                continue;
            }
            let grad = p.grad.as_mut().unwrap();
            for (((theta, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *theta -= lr * weight_decay * *theta;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
        Ok(())
    }
}
