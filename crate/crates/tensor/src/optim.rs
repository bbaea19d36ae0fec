//! Adam with decoupled bookkeeping so its state can be checkpointed.

use std::collections::BTreeMap;

use ndarray::Zip;

use crate::param::Module;
use crate::var::{Array, Gradients};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.99, eps: 1e-8 }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Array,
    pub v: Array,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Adam {
        Adam { config, step: 0, state: BTreeMap::new() }
    }

    /// One update of every trainable parameter of `module` that has a gradient.
    pub fn step(&mut self, module: &mut dyn Module, grads: &Gradients) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let state = &mut self.state;
        module.visit_mut("", &mut |name, p| {
            if !p.trainable() {
                return;
            }
            let Some(g) = grads.get(p.var()) else { return };
            let mom = state.entry(name.to_string()).or_insert_with(|| Moments {
                m: Array::zeros(g.raw_dim()),
                v: Array::zeros(g.raw_dim()),
            });
            let mut value = p.value().clone();
            Zip::from(&mut value).and(&mut mom.m).and(&mut mom.v).and(g).for_each(|w, m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
            p.set_value(value);
        });
    }
}
