//! Adam and AdamW over a [`Params`] store, one learning rate per group.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::tape::{Gradients, Group, Mat, ParamId, Params};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 gives plain Adam.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn adam(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            weight_decay,
            ..Self::adam(lr)
        }
    }
}

/// Per-parameter first and second moments plus a shared step counter.
#[derive(Debug, Clone)]
pub struct Optimizer {
    groups: HashMap<Group, AdamConfig>,
    frozen: BTreeSet<ParamId>,
    m: Vec<Mat>,
    v: Vec<Mat>,
    step: u64,
}

impl Optimizer {
    pub fn new(params: &Params, groups: HashMap<Group, AdamConfig>) -> Self {
        let zeros: Vec<Mat> = params.ids().map(|id| Mat::zeros(params.get(id).raw_dim())).collect();
        Optimizer {
            groups,
            frozen: BTreeSet::new(),
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn freeze(&mut self, id: ParamId) {
        self.frozen.insert(id);
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Scales every group's learning rate by `factor` for subsequent steps.
    pub fn scale_lr(&mut self, factor: f64) {
        for cfg in self.groups.values_mut() {
            cfg.lr *= factor;
        }
    }

    pub fn lr(&self, group: Group) -> Option<f64> {
        self.groups.get(&group).map(|c| c.lr)
    }

    pub fn step(&mut self, params: &mut Params, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        for id in params.ids().collect::<Vec<_>>() {
            if self.frozen.contains(&id) {
                continue;
            }
            let Some(cfg) = self.groups.get(&params.group(id)).copied() else {
                continue;
            };
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            let g = grads.get(id);
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = params.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
                *p -= cfg.lr * (update + cfg.weight_decay * *p);
            });
        }
    }
}
