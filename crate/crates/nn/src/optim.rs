//! Adam and SGD-with-momentum over a [`ParamStore`], plus the cosine
//! learning-rate schedule.

use std::collections::HashMap;

use charformer_core::config::OptimizerName;
use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const SGD_MOMENTUM: f64 = 0.9;

/// Cosine decay from `lr0` at step 0 to `min_lr` at `total` steps. The
/// floor never exceeds `lr0`, so a zero base rate stays zero.
pub fn cosine_lr(lr0: f64, min_lr: f64, step: usize, total: usize) -> f64 {
    let floor = min_lr.min(lr0);
    if total == 0 {
        return lr0;
    }
    let t = (step.min(total) as f64) / total as f64;
    floor + 0.5 * (lr0 - floor) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Optimizer state: first/second moments (Adam) or velocity (SGD, stored
/// in `m`; `v` stays zero), one slot per parameter in store order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerName,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerName, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            kind,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Apply one update with learning rate `lr`. Parameters without a
    /// gradient are left untouched.
    pub fn update(&mut self, params: &mut ParamStore, grads: &HashMap<ParamId, Tensor>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            let Some(g) = grads.get(&id) else { continue };
            let i = id.index();
            let p = params.get_mut(id).data_mut();
            match self.kind {
                OptimizerName::Adam => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        let mh = *m / bc1;
                        let vh = *v / bc2;
                        *p -= lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
                OptimizerName::Sgd => {
                    for ((p, &g), m) in p.iter_mut().zip(g.data()).zip(self.m[i].iter_mut()) {
                        *m = SGD_MOMENTUM * *m + g;
                        *p -= lr * *m;
                    }
                }
            }
        }
    }
}
