//! Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment buffers, one pair per parameter in store order.
/// Frozen parameters keep empty buffers. A fresh state starts at step 0.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let m = store
            .iter()
            .map(|(_, p)| {
                if p.trainable {
                    vec![T::zero(); p.values.len()]
                } else {
                    Vec::new()
                }
            })
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamState { m, v, step: 0 }
    }
}

/// One update over every trainable parameter:
///   theta <- theta - lr*mhat/(sqrt(vhat)+eps) - lr*wd*theta
/// Decay is decoupled: it never enters the moment estimates.
/// A trainable parameter with no gradient is a caller bug, not a zero update.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::usage(format!(
            "optimizer state covers {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let lr = T::from_f64(cfg.lr);
    let eps = T::from_f64(cfg.eps);
    let wd = T::from_f64(cfg.weight_decay);
    let bc1 = T::one() - T::from_f64(cfg.beta1.powi(t));
    let bc2 = T::one() - T::from_f64(cfg.beta2.powi(t));
    let one = T::one();

    for (i, id) in store.ids().into_iter().enumerate() {
        if !store.get(id).trainable {
            continue;
        }
        let grad = match store.get(id).grad.clone() {
            Some(g) => g,
            None => {
                return Err(Error::usage(format!(
                    "trainable parameter '{}' has no gradient; run backward before stepping",
                    store.get(id).name
                )))
            }
        };
        // Moment buffers sized lazily: a parameter can become trainable
        // after the state was created (stage transitions build fresh state,
        // but keep this safe regardless).
        if state.m[i].len() != grad.len() {
            state.m[i] = vec![T::zero(); grad.len()];
            state.v[i] = vec![T::zero(); grad.len()];
        }
        let p = store.get_mut(id);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..grad.len() {
            let g = grad[j];
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            let theta = p.values[j];
            p.values[j] = theta - lr * mhat / (vhat.sqrt() + eps) - lr * wd * theta;
        }
    }
    Ok(())
}
