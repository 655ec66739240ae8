//! Adam with decoupled step-decay learning-rate scheduling.
//!
//! Weight decay is applied by adding `wd * param` to the gradient before the
//! moment updates (classic Adam-with-L2, not AdamW).

use serde::{Deserialize, Serialize};

use crate::nn::{ParamStore, TensorKind};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Multiply the learning rate by `gamma` every `every` epochs, never
    /// dropping below `floor`.
    Step { every: usize, gamma: f64, floor: f64 },
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Step { every, gamma, floor } => {
                let k = if every == 0 { 0 } else { epoch / every };
                (base * gamma.powi(k as i32)).max(floor)
            }
        }
    }
}

pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub step_count: u64,
}

impl Adam {
    pub fn new(weight_decay: f32) -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step_count: 0 }
    }

    /// One update over every trainable entry; zeroes gradients afterwards.
    pub fn step(&mut self, store: &mut ParamStore, lr: f32) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - (self.beta1 as f64).powf(t);
        let bc2 = 1.0 - (self.beta2 as f64).powf(t);
        for e in &mut store.entries {
            if e.kind != TensorKind::Param {
                continue;
            }
            let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
            let val = e.value.as_slice_mut().unwrap();
            let grad = e.grad.as_slice_mut().unwrap();
            let m = e.m.as_slice_mut().unwrap();
            let v = e.v.as_slice_mut().unwrap();
            for i in 0..val.len() {
                let g = grad[i] + wd * val[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] as f64 / bc1;
                let vhat = v[i] as f64 / bc2;
                val[i] -= (lr as f64 * mhat / (vhat.sqrt() + eps as f64)) as f32;
                grad[i] = 0.0;
            }
        }
    }
}
