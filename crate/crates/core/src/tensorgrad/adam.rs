use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Optimizer hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam moments, one slot per parameter (frozen parameters keep `None`).
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub step: u64,
    pub cfg: AdamConfig,
    pub m: Vec<Option<Tensor<T>>>,
    pub v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamConfig) -> Self {
        let slot = |p: &super::params::Param<T>| p.requires_grad.then(|| Tensor::zeros(p.value.dims()));
        AdamState {
            step: 0,
            cfg,
            m: store.iter().map(slot).collect(),
            v: store.iter().map(slot).collect(),
        }
    }
}

/// One Adam update with decoupled weight decay at learning rate `lr`.
///
/// Gradients are left in place; the caller zeroes them.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    let t = (state.step + 1) as i32;
    let c = &state.cfg;
    let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
    let bc1 = T::c(1.0 - c.beta1.powi(t));
    let bc2 = T::c(1.0 - c.beta2.powi(t));
    let (lr, eps, wd) = (T::c(lr), T::c(c.eps), T::c(c.weight_decay));

    for (i, p) in store.iter().enumerate() {
        if p.requires_grad && p.grad.is_none() {
            return Err(Error::Contract(format!("parameter {} has no gradient", p.name)));
        }
        if p.requires_grad && state.m[i].as_ref().map(|m| m.dims()) != Some(p.value.dims()) {
            return Err(Error::shape("adam_state", p.value.dims(), &[]));
        }
    }
    for (i, p) in store.iter_mut().enumerate() {
        if !p.requires_grad {
            continue;
        }
        let g = p.grad.as_ref().expect("checked above");
        let m = state.m[i].as_mut().expect("checked above").data_mut();
        let v = state.v[i].as_mut().expect("slot present").data_mut();
        let w = p.value.data_mut();
        for j in 0..w.len() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + (T::one() - b1) * gj;
            v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            w[j] = w[j] - lr * (mh / (vh.sqrt() + eps) + wd * w[j]);
        }
    }
    state.step += 1;
    Ok(())
}
