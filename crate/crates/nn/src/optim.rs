use serde::{Deserialize, Serialize};

use crate::graph::ParamGrads;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Rescale gradients whose global L2 norm exceeds this; 0 disables.
    pub clip_norm: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
        }
    }
}

/// Adam with decoupled weight decay (AdamW when `weight_decay > 0`).
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let m: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        self.step += 1;
        let c = self.config;
        let norm = grads.global_norm() as f32;
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, g) in &grads.grads {
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = store.get_mut(*id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i] * clip;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * p[i]);
            }
        }
    }
}

/// `ema ← decay·ema + (1 − decay)·current`, parameter by parameter.
pub fn ema_update(ema: &mut ParamStore, current: &ParamStore, decay: f32) {
    for (id, _, t) in current.iter() {
        for (e, &c) in ema.get_mut(id).data_mut().iter_mut().zip(t.data()) {
            *e = decay * *e + (1.0 - decay) * c;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Graph;

    #[test]
    fn ema_moves_toward_current() {
        let mut cur = ParamStore::new();
        cur.add("w", Tensor::full(&[2], 1.0));
        let mut ema = ParamStore::new();
        ema.add("w", Tensor::zeros(&[2]));
        ema_update(&mut ema, &cur, 0.9);
        ema_update(&mut ema, &cur, 0.9);
        assert!((ema.get(crate::ParamId(0)).data()[0] - 0.19).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(&[2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(
            &store,
            AdamConfig {
                lr: 0.1,
                clip_norm: 0.0,
                ..Default::default()
            },
        );
        for _ in 0..300 {
            let mut g = Graph::new();
            let x = g.param(&store, id);
            let sq = g.mul(x, x);
            let loss = g.sum(sq);
            let grads = g.backward(loss);
            opt.step(&mut store, &grads);
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }
}
