use serde::{Deserialize, Serialize};

use super::KernelError;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

/// Moment buffers for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    step: u64,
    m: Vec<f32>,
    v: Vec<f32>,
    config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            config,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }
}

/// One bias-corrected Adam update of `params` in place.
///
/// A gradient containing NaN or infinity leaves both the parameter and the
/// state untouched and returns [`KernelError::NonFiniteGradient`].
pub fn adam_step(params: &mut [f32], grads: &[f32], state: &mut AdamState) -> Result<(), KernelError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(KernelError::ShapeMismatch {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(KernelError::NonFiniteGradient);
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let corr1 = 1.0 - beta1.powi(t);
    let corr2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (beta1 as f32, beta2 as f32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m as f64 / corr1;
        let v_hat = *v as f64 / corr2;
        *p -= (lr * m_hat / (v_hat.sqrt() + eps)) as f32;
    }
    Ok(())
}
