use super::params::{ParamId, ParamStore};
use super::tensor::Scalar;
use crate::error::{Error, Result};

/// Adam moments for the parameters of one optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// Parameters updated by this optimizer, in a fixed order.
    pub params: Vec<ParamId>,
    pub m: Vec<Vec<Scalar>>,
    pub v: Vec<Vec<Scalar>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, params: Vec<ParamId>, lr: f64) -> Self {
        let m: Vec<Vec<Scalar>> = params.iter().map(|id| vec![0.0; store.get(*id).numel()]).collect();
        let v = m.clone();
        AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, params, m, v }
    }
}

/// One Adam update with bias correction over `state.params`, then clears
/// every gradient in the store.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    for id in &state.params {
        if store.grad(*id).is_none() {
            return Err(Error::UninitializedGradient(store.name(*id).to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (slot, id) in state.params.iter().enumerate() {
        let tensor = store.get_mut(*id);
        let grad = tensor.grad.take().expect("checked above");
        let m = &mut state.m[slot];
        let v = &mut state.v[slot];
        for (((p, g), m), v) in tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = *g as f64;
            let m_new = b1 * (*m as f64) + (1.0 - b1) * g;
            let v_new = b2 * (*v as f64) + (1.0 - b2) * g * g;
            *m = m_new as Scalar;
            *v = v_new as Scalar;
            let m_hat = m_new / bc1;
            let v_hat = v_new / bc2;
            *p -= (state.lr * m_hat / (v_hat.sqrt() + state.eps)) as Scalar;
        }
    }
    store.zero_grads();
    Ok(())
}
