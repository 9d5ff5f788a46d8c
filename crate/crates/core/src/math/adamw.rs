use serde::{Deserialize, Serialize};

use super::MathError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }
}

/// AdamW with bias correction and decoupled weight decay.
///
/// One pair of moment buffers per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step_count: u64,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, tensor_sizes: &[usize]) -> Self {
        Self {
            config,
            first_moment: tensor_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: tensor_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Single-tensor convenience wrapper around [`AdamWState::step`].
    pub fn step_flat(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), MathError> {
        self.step(&mut [params], &[grads])
    }

    /// One update over all tensors. Gradients are validated before anything
    /// is mutated, so an error leaves params and state untouched.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<(), MathError> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(MathError::DimMismatch {
                left: self.first_moment.len(),
                right: params.len().min(grads.len()),
            });
        }
        let mut offset = 0;
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(MathError::DimMismatch {
                    left: m.len(),
                    right: p.len().min(g.len()),
                });
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(MathError::NonFiniteGradient { index: offset + i });
            }
            offset += g.len();
        }

        self.step_count += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step_count as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for (k, p) in params.iter_mut().enumerate() {
            let g = grads[k];
            let m = &mut self.first_moment[k];
            let v = &mut self.second_moment[k];
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= lr * weight_decay * p[i];
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
