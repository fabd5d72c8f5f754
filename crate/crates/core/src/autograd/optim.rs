use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Cosine-anneal from `lr` to zero over the run.
    #[serde(default = "yes")]
    pub cosine: bool,
}

fn yes() -> bool {
    true
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            cosine: true,
        }
    }
}

impl SgdConfig {
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if self.cosine && total > 0 {
            cosine_lr(self.lr, step, total)
        } else {
            self.lr
        }
    }
}

/// `base · (1 + cos(π·step/total)) / 2`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    let t = (step.min(total)) as f64 / total.max(1) as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Heavy-ball SGD. Only parameters present in the gradient set move, and a
/// frozen parameter is never touched even if a gradient is supplied.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: BTreeMap<ParamId, Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Sgd {
            cfg,
            velocity: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        for (id, g) in grads.params() {
            if !store.is_trainable(id) {
                continue;
            }
            let p = store.param_mut(id);
            let v = self
                .velocity
                .entry(id)
                .or_insert_with(|| vec![0.0; g.len()]);
            for ((w, vi), gi) in p.data.iter_mut().zip(v.iter_mut()).zip(g) {
                let d = gi + self.cfg.weight_decay * *w;
                *vi = self.cfg.momentum * *vi + d;
                *w -= lr * *vi;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-15);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-15);
    }
}
