use serde::{Deserialize, Serialize};

use super::{Gradients, ParamSet, Real, Result, Tensor, TensorError};

/// Rescales every gradient by `max_norm / norm` when the global L2 norm
/// strictly exceeds `max_norm`. Returns the norm measured before scaling.
pub fn clip_global_norm<T: Real>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(T::of(max_norm / norm));
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    /// Rebuilds a saved optimizer. Moment shapes must match the parameters.
    pub fn from_state(
        config: AdamConfig,
        params: &ParamSet<T>,
        first: Vec<Tensor<T>>,
        second: Vec<Tensor<T>>,
        step: u64,
    ) -> Result<Self> {
        if first.len() != params.len() || second.len() != params.len() {
            return Err(TensorError::Invalid {
                op: "adam",
                reason: "moment count differs from parameter count".into(),
            });
        }
        for ((_, _, p), (m, v)) in params.iter().zip(first.iter().zip(&second)) {
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(TensorError::Shape {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: m.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            config,
            first,
            second,
            step,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.second
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &Gradients<T>) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(TensorError::Invalid {
                op: "adam",
                reason: format!("{} gradients for {} parameters", grads.len(), params.len()),
            });
        }
        for (id, grad) in params.ids().zip(grads.iter()) {
            if grad.shape() != params.get(id).shape() {
                return Err(TensorError::Shape {
                    op: "adam",
                    lhs: params.get(id).shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let correction1 = 1.0 - c.beta1.powi(t);
        let correction2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let (bc1, bc2) = (T::of(correction1), T::of(correction2));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        for (i, id) in params.ids().enumerate().collect::<Vec<_>>() {
            let g = grads.get(id).data();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
