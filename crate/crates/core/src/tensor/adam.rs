use serde::{Deserialize, Serialize};

use super::{Result, Scalar, Tensor, TensorError};

/// Adam hyperparameters. Defaults: beta1 0.9, beta2 0.999, eps 1e-8, lr 1e-4.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates for a fixed list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = sizes.into_iter().map(|n| (vec![T::zero(); n], vec![T::zero(); n])).unzip();
        Self { config, t: 0, m, v }
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.v
    }

    /// Applies one bias-corrected update at learning rate `lr`. A non-finite
    /// gradient rejects the whole step before anything is modified.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&[T]], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                detail: format!("{} params, {} grads, state for {}", params.len(), grads.len(), self.m.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    detail: format!(
                        "parameter {i}: {} values, gradient {}, state {}",
                        p.len(),
                        g.len(),
                        self.m[i].len()
                    ),
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TensorError::NonFiniteGradient { index: i });
            }
        }
        self.t += 1;
        let c = &self.config;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let bc1 = T::from_f64_lossy(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::from_f64_lossy(1.0 - c.beta2.powi(self.t as i32));
        let lr = T::from_f64_lossy(lr);
        let eps = T::from_f64_lossy(c.eps);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
