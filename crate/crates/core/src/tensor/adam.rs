use super::Tensor;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AdamError {
    #[error("non-finite gradient for parameter `{name}` (max |g| = {max_abs})")]
    NonFiniteGradient { name: String, max_abs: f64 },
    #[error("parameter `{name}`: expected {expected} values, gradient has {found}")]
    Shape {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("optimizer tracks {expected} parameters, update supplied {found}")]
    Count { expected: usize, found: usize },
}

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    /// Zeroed moments for parameters of the given element counts.
    pub fn new(config: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (first, second) = sizes
            .into_iter()
            .map(|n| (vec![0.0; n], vec![0.0; n]))
            .unzip();
        Self {
            config,
            step: 0,
            first,
            second,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }

    /// One update of every `(name, parameter)` pair with the matching entry of
    /// `grads`. Every gradient is validated before anything is modified.
    pub fn step(
        &mut self,
        params: &mut [(&str, &mut Tensor)],
        grads: &[&[f64]],
    ) -> Result<(), AdamError> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(AdamError::Count {
                expected: self.first.len(),
                found: params.len().min(grads.len()),
            });
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(AdamError::Shape {
                    name: name.to_string(),
                    expected: p.len(),
                    found: g.len(),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(AdamError::NonFiniteGradient {
                    name: name.to_string(),
                    max_abs: g.iter().fold(0.0f64, |m, v| m.max(v.abs())),
                });
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((_, p), g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (i, w) in p.values_mut().iter_mut().enumerate() {
                let gi = g[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
