use serde::{Deserialize, Serialize};

use super::{Result, TrainConfig, TrainError};
use crate::tensor::{ParamStore, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Learning rate for the `step`-th update (1-based): linear 0 → peak over
/// the warmup, then linear peak → 0 at `total`.
pub fn lr_at(step: u64, peak: f64, warmup: u64, total: u64) -> f64 {
    if step <= warmup {
        if warmup == 0 {
            peak
        } else {
            peak * step as f64 / warmup as f64
        }
    } else if step >= total {
        0.0
    } else {
        peak * (total - step) as f64 / (total - warmup) as f64
    }
}

/// First and second moments mirroring a parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> OptimState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = store.iter().map(|(_, p)| vec![T::zero(); p.value.len()]).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm<T: Real>(store: &ParamStore<T>) -> f64 {
    store.iter().flat_map(|(_, p)| p.grad.iter()).map(|g| g.to_f64().unwrap_or(f64::NAN).powi(2)).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(store);
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Bias-corrected Adam with decoupled weight decay. Decay applies only to
/// parameters flagged `decay` (weights and embeddings, not biases or norms).
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    state: &mut OptimState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (_, p) in store.iter() {
        if p.grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGradient(p.name.clone()));
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = cfg.adam;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (T::lit(beta1), T::lit(beta2));
    let (ob1, ob2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
    let step_size = T::lit(lr / c1);
    let rc2 = T::lit(1.0 / c2.sqrt());
    let eps = T::lit(eps);
    let shrink = T::lit(1.0 - lr * cfg.weight_decay);
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let param = store.get_mut(id);
        let decay = param.decay && cfg.weight_decay != 0.0;
        let grad = std::mem::take(&mut param.grad);
        let value = std::sync::Arc::make_mut(&mut param.value).data_mut();
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..value.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + ob1 * g;
            v[i] = b2 * v[i] + ob2 * g * g;
            if decay {
                value[i] *= shrink;
            }
            value[i] -= step_size * m[i] / ((v[i]).sqrt() * rc2 + eps);
        }
        param.grad = grad;
    }
    Ok(())
}
