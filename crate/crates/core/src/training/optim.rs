//! Optimizers and the adversarial/learning-rate schedules.

use std::collections::HashMap;

use crate::array::Array;
use crate::error::{HctError, Result};

/// Gradient-reversal coefficient schedule: 2/(1+exp(-gamma*p)) - 1, ramping
/// from 0 at p=0 toward 1 as training progresses.
pub fn grl_coefficient(gamma: f64, progress: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&progress) {
        return Err(HctError::InvalidArgument(format!(
            "progress must lie in [0, 1], got {}",
            progress
        )));
    }
    Ok(2.0 / (1.0 + (-gamma * progress).exp()) - 1.0)
}

/// Per-iteration learning-rate decay: lr0 / (1 + alpha*p)^beta.
pub fn decayed_lr(lr0: f64, alpha: f64, beta: f64, progress: f64) -> f64 {
    lr0 / (1.0 + alpha * progress).powf(beta)
}

/// Plain SGD with decoupled weight decay.
pub struct Sgd {
    pub weight_decay: f64,
}

impl Sgd {
    pub fn step(&self, param: &mut Array, grad: &Array, lr: f64) {
        for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
            *p -= lr * (g + self.weight_decay * *p);
        }
    }
}

struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam with bias correction; state is keyed by parameter name.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: HashMap<String, AdamSlot>,
}

impl Adam {
    pub fn new() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, state: HashMap::new() }
    }

    pub fn step(&mut self, name: &str, param: &mut Array, grad: &Array, lr: f64) {
        let slot = self.state.entry(name.to_string()).or_insert_with(|| AdamSlot {
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
            t: 0,
        });
        slot.t += 1;
        let bc1 = 1.0 - self.beta1.powi(slot.t as i32);
        let bc2 = 1.0 - self.beta2.powi(slot.t as i32);
        for ((p, &g), (m, v)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}
