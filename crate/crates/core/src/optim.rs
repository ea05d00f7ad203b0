//! Adam with per-tensor moment buffers.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{BoundParams, ParamId, ParamStore};
use crate::graph::Gradients;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// One moment slot per tensor, sized by `lens`.
    pub fn new(cfg: AdamConfig, lens: &[usize]) -> Self {
        Self {
            cfg,
            t: 0,
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Advances the shared step counter; call once before the slot updates of a step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Updates tensor `slot` in place. `lr_mult` scales the base step size.
    pub fn update(&mut self, slot: usize, param: &mut [f64], grad: &[f64], lr_mult: f64) {
        assert!(self.t > 0, "begin_step must precede update");
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let step = lr * lr_mult;
        let m = &mut self.m[slot];
        let v = &mut self.v[slot];
        assert_eq!(m.len(), param.len());
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            param[i] -= step * mh / (vh.sqrt() + eps);
        }
    }
}

impl Adam {
    /// One moment slot per parameter of `store`.
    pub fn for_store(cfg: AdamConfig, store: &ParamStore) -> Self {
        let lens: Vec<usize> = store.ids().map(|id| store.get(id).len()).collect();
        Self::new(cfg, &lens)
    }

    /// One step over every parameter that received a gradient. The graph
    /// holding `bound` must be dropped first so updates do not copy.
    pub fn step_store(
        &mut self,
        store: &mut ParamStore,
        bound: &BoundParams,
        grads: &mut Gradients,
        lr_mult: impl Fn(ParamId) -> f64,
    ) {
        self.begin_step();
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if let Some(gr) = grads.take(bound.var(id)) {
                let mult = lr_mult(id);
                self.update(id.0, store.get_mut(id).data_mut(), gr.data(), mult);
            }
        }
    }
}
