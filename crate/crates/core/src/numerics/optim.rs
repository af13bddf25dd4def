//! Adaptive moment estimation.

use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter first and second moments, indexed like the store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            state: AdamState::default(),
        }
    }

    /// Applies one update from the gradients held in `store`, scaling the
    /// learning rate of parameters whose name starts with a listed prefix.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, lr_scales: &[(&str, f64)]) {
        let n = store.len();
        self.state.m.resize(n, Vec::new());
        self.state.v.resize(n, Vec::new());
        self.state.step += 1;
        let t = self.state.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (idx, e) in store.entries_mut().iter_mut().enumerate() {
            if !e.is_optimized() {
                continue;
            }
            let scale = lr_scales
                .iter()
                .find(|(p, _)| e.name.starts_with(p))
                .map_or(1.0, |&(_, s)| s);
            let lr = self.cfg.lr * scale;
            let (m, v) = (&mut self.state.m[idx], &mut self.state.v[idx]);
            if m.len() != e.grad.len() {
                *m = vec![0.0; e.grad.len()];
                *v = vec![0.0; e.grad.len()];
            }
            for (((w, &g), m), v) in e.value.data_mut().iter_mut().zip(&e.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.to_f64_lossy() + self.cfg.weight_decay * w.to_f64_lossy();
                let mi = b1 * *m as f64 + (1.0 - b1) * g;
                let vi = b2 * *v as f64 + (1.0 - b2) * g * g;
                *m = mi as f32;
                *v = vi as f32;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + self.cfg.eps);
                *w = *w - T::lit(update);
            }
        }
    }
}
