use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Tensor};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = |s: &ParamStore| s.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            first: zeros(store),
            second: zeros(store),
        }
    }

    /// Rebuilds optimizer state from checkpointed moments.
    pub fn from_state(config: AdamWConfig, step: u64, first: Vec<Tensor>, second: Vec<Tensor>) -> Self {
        Self {
            config,
            step,
            first,
            second,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first, &self.second)
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, g) in grads.params() {
            let p = store.get_mut(id).data_mut();
            let m = self.first[id.index()].data_mut();
            let v = self.second[id.index()].data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                p[i] -= c.lr * c.weight_decay * p[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(&[1, 2], vec![3.0, -2.0]));
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.05,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..500 {
            let grads = {
                let mut g = Graph::new(&store);
                let p = g.param(w);
                let target = g.input(Tensor::new(&[1, 2], vec![0.5, 0.25]));
                let loss = g.mse(p, target);
                g.backward(loss)
            };
            opt.step(&mut store, &grads);
        }
        let got = store.get(w).data();
        assert!((got[0] - 0.5).abs() < 1e-2 && (got[1] - 0.25).abs() < 1e-2, "{got:?}");
        assert_eq!(opt.steps_taken(), 500);
    }
}
