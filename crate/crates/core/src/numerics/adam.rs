//! Adam with the standard bias correction, applied over a [`Params`]
//! collection. Non-finite gradients abort the step and name the offending
//! parameter instead of silently poisoning the weights.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::params::Params;
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
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

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// First/second moment buffers, allocated lazily per parameter on the first
/// step that touches it.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// One optimizer step. `grads` must supply a gradient for every parameter —
/// a missing name is a wiring bug, not a zero gradient.
pub fn adam_step<T: Scalar>(
    params: &mut Params<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as f64;
    // Fold both bias corrections into the step size.
    let lr_t = T::from_f64(cfg.lr * (1.0 - cfg.beta2.powf(t)).sqrt() / (1.0 - cfg.beta1.powf(t)));
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one_m_b1 = T::from_f64(1.0 - cfg.beta1);
    let one_m_b2 = T::from_f64(1.0 - cfg.beta2);
    let eps = T::from_f64(cfg.eps);

    for (name, p) in params.iter_mut() {
        let g = grads.get(name).ok_or_else(|| Error::InvalidArgument {
            op: "adam_step",
            reason: format!("no gradient supplied for parameter {name:?}"),
        })?;
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGrad { name: name.clone() });
        }
        let n = p.len();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![T::ZERO; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![T::ZERO; n]);
        let pd = p.data_mut();
        let gd = g.data();
        for i in 0..n {
            m[i] = b1 * m[i] + one_m_b1 * gd[i];
            v[i] = b2 * v[i] + one_m_b2 * gd[i] * gd[i];
            pd[i] = pd[i] - lr_t * m[i] / (v[i].sqrt() + eps);
        }
    }
    Ok(())
}
