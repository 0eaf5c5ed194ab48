use serde::{Deserialize, Serialize};

use super::graph::{Grads, ParamStore};
use super::tensor::Tensor;

/// Adam with decoupled weight decay and linear warmup to a constant rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub(crate) m: Vec<Tensor>,
    pub(crate) v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, warmup: u64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store
            .params
            .iter()
            .map(|p| Tensor::zeros(p.value.rows, p.value.cols))
            .collect();
        Self {
            lr,
            warmup,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Learning rate applied at optimizer step `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup == 0 || step >= self.warmup {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup as f64
        }
    }

    /// Global gradient norm over the given grads.
    pub fn grad_norm(grads: &Grads) -> f64 {
        grads
            .0
            .iter()
            .flatten()
            .flat_map(|g| g.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Applies one update; frozen parameters and missing grads are skipped.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads) {
        let lr = self.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in store.params.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let Some(g) = grads.get(i) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..g.data.len() {
                let gk = g.data[k];
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * gk;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m.data[k] / bc1;
                let vh = v.data[k] / bc2;
                let w = &mut p.value.data[k];
                *w -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * *w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Graph;
    use std::sync::Arc;

    #[test]
    fn warmup_schedule() {
        let s = ParamStore::new();
        let o = AdamW::new(&s, 1e-4, 2000, 0.0);
        assert_eq!(o.lr_at(0), 0.0);
        assert!((o.lr_at(1000) - 5e-5).abs() < 1e-18);
        assert_eq!(o.lr_at(2000), 1e-4);
        assert_eq!(o.lr_at(50_000), 1e-4);
    }

    #[test]
    fn minimizes_quadratic_and_respects_freeze() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::from_vec(1, 3, vec![1.0, -2.0, 3.0]));
        s.add("b", Tensor::from_vec(1, 1, vec![5.0]));
        s.freeze_where(|n| n == "b");
        let mut o = AdamW::new(&s, 0.05, 0, 0.0);
        let target = Arc::new(Tensor::zeros(1, 3));
        for _ in 0..400 {
            let grads = {
                let mut g = Graph::new(&s);
                let a = g.param_named("a");
                let l = g.mse(a, target.clone());
                g.backward(l)
            };
            o.update(&mut s, &grads);
        }
        assert!(s.get("a").data.iter().all(|v| v.abs() < 1e-2));
        assert_eq!(s.get("b").data, vec![5.0]);
    }
}
