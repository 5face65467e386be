//! First-order optimizers operating on a [`ParamStore`].

use serde::{Deserialize, Serialize};

use super::params::{ParamGrads, ParamStore};
use crate::tensor::Tensor;

/// Plain stochastic gradient descent with optional global-norm clipping.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub clip: Option<f64>,
}

impl Sgd {
    pub fn new(lr: f64, clip: Option<f64>) -> Self {
        Self { lr, clip }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        let mut grads = grads.clone();
        if let Some(c) = self.clip {
            grads.clip_global_norm(c);
        }
        for id in store.ids().collect::<Vec<_>>() {
            if let Some(g) = grads.get(id) {
                let p = store.get_mut(id);
                for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= self.lr * d;
                }
            }
        }
    }
}

/// Adaptive-moment estimation.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: Option<f64>,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, clip: Option<f64>) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        let mut grads = grads.clone();
        if let Some(c) = self.clip {
            grads.clip_global_norm(c);
        }
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let p = store.get_mut(id);
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
            for (((w, d), mm), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mm = self.beta1 * *mm + (1.0 - self.beta1) * d;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * d * d;
                let mhat = *mm / bc1;
                let vhat = *vv / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Per-epoch learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `lr · factor^epoch`
    Exponential { factor: f64 },
    /// `lr · factor` from `at_epoch` onwards.
    Step { at_epoch: usize, factor: f64 },
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Exponential { factor } => base * factor.powi(epoch as i32),
            LrSchedule::Step { at_epoch, factor } => {
                if epoch >= at_epoch {
                    base * factor
                } else {
                    base
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::row_vector(vec![3.0, -2.0]));
        let mut opt = Adam::new(0.1, None);
        for _ in 0..500 {
            let x = store.get(id).clone();
            let mut g = ParamGrads::new(1);
            g.accumulate_one(id, &x.map(|v| 2.0 * v));
            opt.step(&mut store, &g);
        }
        assert!(store.get(id).sq_norm() < 1e-4);
    }

    #[test]
    fn schedules() {
        let e = LrSchedule::Exponential { factor: 0.99 };
        assert!((e.lr_at(0.001, 2) - 0.001 * 0.9801).abs() < 1e-15);
        let s = LrSchedule::Step { at_epoch: 30, factor: 0.1 };
        assert_eq!(s.lr_at(1e-4, 29), 1e-4);
        assert!((s.lr_at(1e-4, 30) - 1e-5).abs() < 1e-18);
    }
}
