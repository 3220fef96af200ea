use serde::{Deserialize, Serialize};

use crate::tensor::{ParamStore, Tensor};

/// RMSProp with per-parameter L2 added to the gradient.
///
/// ```text
/// g ← g + λθ
/// s ← ρs + (1 − ρ)g²
/// θ ← θ − lr · g / (√s + ε)
/// ```
#[derive(Clone, Debug)]
pub struct RmsProp {
    pub rho: f64,
    pub epsilon: f64,
    accumulators: Vec<Tensor>,
}

impl RmsProp {
    pub fn new(store: &ParamStore, rho: f64, epsilon: f64) -> Self {
        Self {
            rho,
            epsilon,
            accumulators: store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn accumulators(&self) -> &[Tensor] {
        &self.accumulators
    }

    /// Applies one update; `grads` is aligned with the parameters of `store`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for ((id, grad), acc) in ids.into_iter().zip(grads).zip(&mut self.accumulators) {
            let param = store.get_mut(id);
            let wd = param.weight_decay;
            let values = param.value.data_mut();
            for ((theta, &g), s) in values.iter_mut().zip(grad.data()).zip(acc.data_mut()) {
                let g = g + wd * *theta;
                *s = self.rho * *s + (1.0 - self.rho) * g * g;
                *theta -= lr * g / (s.sqrt() + self.epsilon);
            }
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// Multiplies the learning rate by `factor` after `patience` epochs without an
/// improvement larger than `threshold`, never going below `min_lr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub min_lr: f64,
    best: f64,
    wait: usize,
}

impl PlateauSchedule {
    pub fn new(factor: f64, patience: usize, threshold: f64, min_lr: f64) -> Self {
        Self {
            factor,
            patience,
            threshold,
            min_lr,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    /// Records one epoch's validation loss and returns the learning rate to use next.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best - self.threshold {
            self.best = loss;
            self.wait = 0;
            return lr;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            self.wait = 0;
            return (lr * self.factor).max(self.min_lr);
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> (ParamStore, crate::tensor::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::scalar(value), 0.0).unwrap();
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut store, id) = single(0.7);
        let mut opt = RmsProp::new(&store, 0.9, 1e-7);
        for _ in 0..5 {
            opt.step(&mut store, &[Tensor::scalar(0.0)], 0.1);
        }
        assert_eq!(store.get(id).value.data()[0], 0.7);
    }

    #[test]
    fn constant_gradient_approaches_sign_step() {
        let (mut store, id) = single(0.0);
        let mut opt = RmsProp::new(&store, 0.9, 1e-7);
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for _ in 0..200 {
            opt.step(&mut store, &[Tensor::scalar(-2.5)], 0.01);
            let now = store.get(id).value.data()[0];
            last_step = now - prev;
            prev = now;
        }
        assert!((last_step - 0.01).abs() < 1e-8, "{last_step}");
        assert!(opt.accumulators()[0].data()[0] >= 0.0);
    }

    #[test]
    fn quadratic_converges() {
        let (mut store, id) = single(1.0);
        let mut opt = RmsProp::new(&store, 0.9, 1e-7);
        for _ in 0..50 {
            let theta = store.get(id).value.data()[0];
            opt.step(&mut store, &[Tensor::scalar(2.0 * theta)], 0.1);
        }
        assert!(store.get(id).value.data()[0].abs() < 0.1);
    }

    #[test]
    fn one_small_step_decreases_convex_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::row(&[1.0, -2.0, 0.5]), 0.0).unwrap();
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1] * x[1] + 0.5 * x[2] * x[2] + x[0] * x[1];
        let grad = |x: &[f64]| Tensor::row(&[2.0 * x[0] + x[1], 6.0 * x[1] + x[0], x[2]]);
        let before = f(store.get(id).value.data());
        let g = grad(store.get(id).value.data());
        RmsProp::new(&store, 0.9, 1e-7).step(&mut store, &[g], 1e-3);
        assert!(f(store.get(id).value.data()) < before);
    }

    #[test]
    fn weight_decay_only_where_set() {
        let mut store = ParamStore::new();
        let a = store.add("plain", Tensor::scalar(1.0), 0.0).unwrap();
        let b = store.add("recurrent", Tensor::scalar(1.0), 1e-4).unwrap();
        let mut opt = RmsProp::new(&store, 0.9, 1e-7);
        opt.step(&mut store, &[Tensor::scalar(0.0), Tensor::scalar(0.0)], 0.01);
        assert_eq!(store.get(a).value.data()[0], 1.0);
        assert!(store.get(b).value.data()[0] < 1.0);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Tensor::row(&[3.0, 4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn schedule_semantics() {
        let mut s = PlateauSchedule::new(0.2, 10, 1e-4, 1e-7);
        let mut lr = 1e-4;
        for k in 0..30 {
            lr = s.observe(1.0 / (k + 1) as f64, lr);
        }
        assert_eq!(lr, 1e-4);

        let mut s = PlateauSchedule::new(0.2, 10, 1e-4, 1e-7);
        let mut lr = 1.0;
        let mut history = Vec::new();
        for _ in 0..11 {
            lr = s.observe(0.5, lr);
            history.push(lr);
        }
        assert_eq!(history.iter().filter(|&&v| v != 1.0).count(), 1);
        assert_eq!(lr, 0.2);
        for _ in 0..10 {
            lr = s.observe(0.5, lr);
        }
        assert!((lr - 0.04).abs() < 1e-15);

        let mut s = PlateauSchedule::new(0.2, 1, 1e-4, 1e-7);
        let mut lr = 1e-6;
        for _ in 0..10 {
            lr = s.observe(1.0, lr);
        }
        assert_eq!(lr, 1e-7);
    }
}
