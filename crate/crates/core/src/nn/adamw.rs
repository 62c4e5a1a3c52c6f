//! Adam with decoupled weight decay.
//!
//! ```text
//! w ← w · (1 − lr·λ)
//! m ← β₁·m + (1 − β₁)·g
//! v ← β₂·v + (1 − β₂)·g²
//! w ← w − lr · (m / (1 − β₁ᵗ)) / (sqrt(v / (1 − β₂ᵗ)) + ε)
//! ```

use serde::{Deserialize, Serialize};

use super::Tensors;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamWState<P> {
    pub config: AdamWConfig,
    pub first_moment: P,
    pub second_moment: P,
    pub step_count: u64,
}

impl<P: Tensors> AdamWState<P> {
    pub fn new(params: &P, config: AdamWConfig) -> Self {
        Self {
            config,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step_count: 0,
        }
    }
}

/// Applies one update in place. Non-finite gradients abort the update and
/// leave both the parameters and the optimizer state untouched.
pub fn adamw_step<P: Tensors>(params: &mut P, grads: &P, state: &mut AdamWState<P>) -> Result<()> {
    if !params.shapes_match(grads) || !params.shapes_match(&state.first_moment) {
        return Err(Error::Shape(
            "parameters, gradients and optimizer moments differ in shape".into(),
        ));
    }
    for (k, g) in grads.slices().iter().enumerate() {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient at tensor {k}, entry {i}; update aborted"
            )));
        }
    }

    let AdamWConfig {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);
    let decay = 1.0 - lr * weight_decay;

    let grad_slices = grads.slices();
    let mut m_slices = state.first_moment.slices_mut();
    let mut v_slices = state.second_moment.slices_mut();
    for (k, w) in params.slices_mut().into_iter().enumerate() {
        let g = grad_slices[k];
        let m = &mut *m_slices[k];
        let v = &mut *v_slices[k];
        for i in 0..w.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            w[i] = w[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
