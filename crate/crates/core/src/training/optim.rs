use std::collections::BTreeMap;

use autograd::Tensor;
use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::params::{ParamGroup, ParamKind, ParamStore};
use crate::training::schedule::GroupRates;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, b) in [("optim.beta1", self.beta1), ("optim.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                errs.push(format!("{name}: must be in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            errs.push(format!("optim.eps: must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0) {
            errs.push(format!(
                "optim.weight_decay: must be non-negative, got {}",
                self.weight_decay
            ));
        }
        errs
    }
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: OptimConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(cfg: OptimConfig) -> Self {
        Self {
            cfg,
            state: AdamState::default(),
        }
    }

    /// One update over every parameter in `grads`, each at its group's rate.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        rates: GroupRates,
    ) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let OptimConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, grad) in grads {
            let lr = match store.get(name).map(|e| e.kind) {
                Some(ParamKind::Trainable(ParamGroup::Base)) => rates.base,
                Some(ParamKind::Trainable(ParamGroup::Tfc)) => rates.tfc,
                _ => continue,
            };
            let (m, v) = self
                .state
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(grad.raw_dim()), Tensor::zeros(grad.raw_dim())));
            let theta = store.value_mut(name);
            Zip::from(theta)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    let g = g + weight_decay * *p;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}
