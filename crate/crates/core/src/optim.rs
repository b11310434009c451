//! AdamW: Adam moments with weight decay decoupled from the gradient.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamKind, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 4e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Decay applies to weight matrices and kernels only
    /// (rank ≥ 2); biases, norms and embeddings' rank-1 rows are exempt.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, g) in grads {
            if store.entry(*id).kind != ParamKind::Trainable {
                continue;
            }
            let i = id.index();
            if self.m.len() <= i {
                self.m.resize(i + 1, None);
                self.v.resize(i + 1, None);
            }
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let p = store.get_mut(*id);
            let decay = if p.rank() >= 2 { c.lr * c.weight_decay } else { 0.0 };
            for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= decay * *w + c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(vec![1.0, -2.0]));
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() });
        opt.step(&mut store, &[(id, Tensor::from_vec(vec![3.0, -0.5]))]);
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled_and_skips_vectors() {
        let mut store = ParamStore::new();
        let m = store.add("m", Tensor::full([2, 2], 1.0));
        let b = store.add("b", Tensor::full([2], 1.0));
        let mut opt = AdamW::new(AdamWConfig { lr: 0.5, weight_decay: 0.1, ..Default::default() });
        opt.step(&mut store, &[(m, Tensor::zeros([2, 2])), (b, Tensor::zeros([2]))]);
        assert!(store.get(m).data().iter().all(|&w| (w - 0.95).abs() < 1e-12));
        assert!(store.get(b).data().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_vec(vec![5.0, -3.0]));
        let mut opt = AdamW::new(AdamWConfig { lr: 0.05, weight_decay: 0.0, ..Default::default() });
        for _ in 0..2000 {
            let g = store.get(id).map(|x| 2.0 * (x - 1.0));
            opt.step(&mut store, &[(id, g)]);
        }
        assert!(store.get(id).data().iter().all(|x| (x - 1.0).abs() < 1e-3));
    }
}
