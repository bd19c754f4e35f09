//! Adam with bias correction, over a [`ParamStore`].

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tensor::{Scalar, TensorData};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 1e-4, beta1: 0.5, beta2: 0.9, epsilon: 1e-8 }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Clone)]
pub struct AdamState<T: Scalar> {
    pub step: u64,
    pub m: BTreeMap<String, TensorData<T>>,
    pub v: BTreeMap<String, TensorData<T>>,
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState { step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }
}

/// One update over every (name, grad) pair. Moments are allocated lazily and
/// mirror parameter shapes. Deterministic given inputs.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &BTreeMap<String, TensorData<T>>,
    state: &mut AdamState<T>,
    hp: &AdamParams,
) {
    state.step += 1;
    let t = state.step;
    let b1 = T::from_f64(hp.beta1);
    let b2 = T::from_f64(hp.beta2);
    let one = T::one();
    let lr = T::from_f64(hp.lr);
    let eps = T::from_f64(hp.epsilon);
    let corr1 = T::from_f64(1.0 - hp.beta1.powi(t as i32));
    let corr2 = T::from_f64(1.0 - hp.beta2.powi(t as i32));

    for (name, grad) in grads {
        let param = match store.get_mut(name) {
            Ok(p) => p,
            Err(_) => continue,
        };
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| TensorData::zeros(param.shape().clone()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| TensorData::zeros(param.shape().clone()));
        for ((p, &g), (mi, vi)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mi = b1 * *mi + (one - b1) * g;
            *vi = b2 * *vi + (one - b2) * g * g;
            let m_hat = *mi / corr1;
            let v_hat = *vi / corr2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
