//! Adam optimizer with decoupled weight decay.
//!
//! The update follows the standard bias-corrected moment recursion;
//! weight decay is applied directly to the weights (decoupled), not
//! folded into the gradient. Updates walk parameters in registration
//! order, so a full step is deterministic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::ParamStore;
use super::{DenseArray, Scalar};

/// Optimizer hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Usage(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Usage(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Usage(format!("{name} must be in [0,1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Usage(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// First/second moment buffers plus the step counter.
pub struct AdamState<S> {
    m: Vec<DenseArray<S>>,
    v: Vec<DenseArray<S>>,
    pub step: u64,
}

impl<S: Scalar> AdamState<S> {
    /// Zero-initialized moments shaped after the store's parameters.
    pub fn new(store: &ParamStore<S>) -> Self {
        let shapes: Vec<(usize, usize)> = (0..store.len())
            .map(|i| store.value_at(i).shape())
            .collect();
        AdamState {
            m: shapes.iter().map(|&(r, c)| DenseArray::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| DenseArray::zeros(r, c)).collect(),
            step: 0,
        }
    }
}

/// One Adam step over every parameter, in registration order.
///
/// `p -= lr * (m_hat / (sqrt(v_hat) + eps))` followed by decoupled decay
/// `p -= lr * wd * p`. Errors if any updated value goes non-finite.
pub fn adam_step<S: Scalar>(
    store: &mut ParamStore<S>,
    state: &mut AdamState<S>,
    config: &AdamConfig,
) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::shape(
            "adam_step",
            format!("state for {} params, store has {}", state.m.len(), store.len()),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = S::from_f64(config.beta1);
    let b2 = S::from_f64(config.beta2);
    let lr = S::from_f64(config.learning_rate);
    let eps = S::from_f64(config.epsilon);
    let wd = S::from_f64(config.weight_decay);
    let one = S::one();
    let bc1 = one - b1.powi(t);
    let bc2 = one - b2.powi(t);

    let (values, grads) = store.optimizer_view();
    for slot in 0..values.len() {
        let g = grads[slot].as_slice();
        let m = state.m[slot].as_mut_slice();
        let v = state.v[slot].as_mut_slice();
        let p = values[slot].as_mut_slice();
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * p[i]);
        }
    }
    if let Some(which) = store.any_non_finite() {
        return Err(Error::NonFinite(format!("after adam step {t}: {which}")));
    }
    Ok(())
}
