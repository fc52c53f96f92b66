//! AdamW with decoupled weight decay.

use crate::error::{CoreError, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// Optimizer state: first/second moment estimates mirroring every
/// parameter shape, plus the step counter used for bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimState {
    pub fn new(store: &ParameterStore, lr: f64, weight_decay: f64) -> Self {
        let m = store
            .iter()
            .map(|(name, t)| (name.clone(), Tensor::zeros(t.shape().to_vec())))
            .collect();
        let v = store
            .iter()
            .map(|(name, t)| (name.clone(), Tensor::zeros(t.shape().to_vec())))
            .collect();
        OptimState {
            m,
            v,
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// One AdamW step over every parameter. Weight decay is decoupled:
/// `p -= lr * wd * p` happens independently of the moment update, so
/// `wd = 0` is exactly plain Adam. A non-finite gradient aborts the
/// whole step before any parameter is touched.
pub fn adamw_step(store: &mut ParameterStore, grads: &BTreeMap<String, Tensor>, state: &mut OptimState) -> Result<()> {
    // Validate everything first; mutate nothing on failure.
    let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
    for name in &names {
        let g = grads
            .get(name)
            .ok_or_else(|| CoreError::contract(format!("missing gradient for {name}")))?;
        let p = store.get(name).expect("name enumerated from store");
        if g.shape() != p.shape() {
            return Err(CoreError::shape("adamw_step", p.shape(), g.shape()));
        }
        if !g.data().iter().all(|v| v.is_finite()) {
            return Err(CoreError::numerics(format!("gradient of {name}")));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);

    for name in &names {
        let g = &grads[name];
        let p = store.get(name).expect("validated").clone();
        let m = state.m.get_mut(name).expect("moment mirrors store");
        let v = state.v.get_mut(name).expect("moment mirrors store");

        let mut p_new = Vec::with_capacity(p.numel());
        let mut m_new = Vec::with_capacity(p.numel());
        let mut v_new = Vec::with_capacity(p.numel());
        for i in 0..p.numel() {
            let gi = g.data()[i];
            let mi = state.beta1 * m.data()[i] + (1.0 - state.beta1) * gi;
            let vi = state.beta2 * v.data()[i] + (1.0 - state.beta2) * gi * gi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let update = state.lr * m_hat / (v_hat.sqrt() + state.eps);
            let decay = state.lr * state.weight_decay * p.data()[i];
            p_new.push(p.data()[i] - update - decay);
            m_new.push(mi);
            v_new.push(vi);
        }
        *m = Tensor::new(p.shape().to_vec(), m_new)?;
        *v = Tensor::new(p.shape().to_vec(), v_new)?;
        store.set(name, Tensor::new(p.shape().to_vec(), p_new)?)?;
    }
    Ok(())
}
