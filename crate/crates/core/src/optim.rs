//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::param::Parameter;

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Optimizer state: per-parameter moments plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState::new(0.9, 0.999, 1e-8)
    }
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            beta1,
            beta2,
            eps,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.moments.get(name).map(|m| m.first.as_slice())
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.moments.get(name).map(|m| m.second.as_slice())
    }
}

/// One Adam update using the gradients stored on each parameter.
///
/// Frozen parameters and parameters without a gradient are left untouched,
/// moments included. The step counter advances by one per call.
pub fn adam_step(params: &mut [&mut Parameter], state: &mut AdamState, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate {lr} must be finite and >= 0")));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for p in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        let Some(grad) = p.tensor.grad.as_ref() else {
            continue;
        };
        if grad.len() != p.tensor.numel() {
            return Err(Error::Shape(format!(
                "gradient for {} has {} entries, parameter has {}",
                p.name,
                grad.len(),
                p.tensor.numel()
            )));
        }
        let m = state
            .moments
            .entry(p.name.clone())
            .or_insert_with(|| Moments {
                first: vec![0.0; grad.len()],
                second: vec![0.0; grad.len()],
            });
        let grad = grad.clone();
        let values = p.tensor.values_mut();
        for (((w, g), m1), m2) in values
            .iter_mut()
            .zip(&grad)
            .zip(m.first.iter_mut())
            .zip(m.second.iter_mut())
        {
            *m1 = b1 * *m1 + (1.0 - b1) * g;
            *m2 = b2 * *m2 + (1.0 - b2) * g * g;
            let m_hat = *m1 / c1;
            let v_hat = *m2 / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
