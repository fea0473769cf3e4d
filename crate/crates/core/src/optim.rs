//! AdamW with decoupled weight decay and the epoch-granular cosine schedule.

use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{bail, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moment estimates, one pair per store entry.
#[derive(Clone, Debug)]
pub struct AdamWState<T> {
    pub config: AdamWConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step_count: u64,
}

impl<T: Real> AdamWState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let m: Vec<_> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let v = m.clone();
        Self { config, m, v, step_count: 0 }
    }

    /// One AdamW update of every trainable entry, then clears all gradients.
    ///
    /// Weight decay applies to matrices and kernels only (rank ≥ 2); biases,
    /// norm gains and embeddings of rank 1 are not decayed.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.step_count += 1;
        let c = &self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let (inv_bc1, inv_bc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
        let (lr_t, eps) = (T::of(lr), T::of(c.eps));
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let decay = if p.value.rank() >= 2 { T::of(lr * c.weight_decay) } else { T::zero() };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let grad = p.grad.data();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = b1 * m[j] + one_b1 * g;
                v[j] = b2 * v[j] + one_b2 * g * g;
                let m_hat = m[j] * inv_bc1;
                let v_hat = v[j] * inv_bc2;
                *w = *w - decay * *w - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        store.zero_grads();
    }
}

/// Linear warm-up followed by cosine decay, stepped once per epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineWarmupSchedule {
    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl CosineWarmupSchedule {
    pub fn new(max_lr: f64, min_lr: f64, warmup_epochs: usize, total_epochs: usize) -> Result<Self> {
        if !(min_lr <= max_lr) || min_lr < 0.0 {
            bail!(InvalidArgument, "learning rates must satisfy 0 <= min_lr ({}) <= max_lr ({})", min_lr, max_lr);
        }
        if warmup_epochs >= total_epochs {
            bail!(InvalidArgument, "warmup_epochs ({}) must be below total_epochs ({})", warmup_epochs, total_epochs);
        }
        Ok(Self { max_lr, min_lr, warmup_epochs, total_epochs })
    }

    pub fn lr(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            bail!(OutOfRange, "epoch {} outside [0, {})", epoch, self.total_epochs);
        }
        if epoch < self.warmup_epochs {
            return Ok(self.max_lr * epoch as f64 / self.warmup_epochs as f64);
        }
        let t = (epoch - self.warmup_epochs) as f64 / (self.total_epochs - self.warmup_epochs) as f64;
        Ok(self.min_lr + (self.max_lr - self.min_lr) * (1.0 + Float::cos(core::f64::consts::PI * t)) / 2.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_endpoints() {
        let s = CosineWarmupSchedule::new(3e-4, 5e-5, 40, 400).unwrap();
        assert_eq!(s.lr(40).unwrap(), 3e-4);
        assert!((s.lr(20).unwrap() - 1.5e-4).abs() < 1e-15);
        assert_eq!(s.lr(0).unwrap(), 0.0);
        let last = s.lr(399).unwrap();
        assert!((last - 5e-5).abs() / 5e-5 < 0.01);
        assert!(s.lr(400).is_err());
        assert!(CosineWarmupSchedule::new(1e-3, 1e-2, 1, 10).is_err());
        assert!(CosineWarmupSchedule::new(1e-3, 1e-4, 10, 10).is_err());
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let s = CosineWarmupSchedule::new(2e-4, 5e-6, 20, 200).unwrap();
        let lrs: Vec<f64> = (20..200).map(|e| s.lr(e).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    fn single(value: f64) -> (ParamStore<f64>, crate::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[1, 1], alloc::vec![value]).unwrap(), true);
        (store, id)
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut store, id) = single(0.7);
        let mut opt = AdamWState::new(&store, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.step(&mut store, 0.1);
        assert_eq!(store.value(id).data()[0], 0.7);
    }

    #[test]
    fn descends_a_quadratic() {
        // f(w) = w²/2, gradient w.
        let (mut store, id) = single(1.0);
        let mut opt = AdamWState::new(&store, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let w0 = store.value(id).data()[0];
        store.get_mut(id).grad.data_mut()[0] = w0;
        opt.step(&mut store, 0.1);
        assert!(store.value(id).data()[0] < w0);
        assert_eq!(store.grad(id).data()[0], 0.0);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(w) = ½ Σ a_i (w_i − c_i)², minimum at c.
        let a = [1.0, 4.0, 0.5];
        let c = [0.3, -1.2, 2.0];
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[1, 3], alloc::vec![0.0; 3]).unwrap(), true);
        let mut opt = AdamWState::new(&store, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let grad_norm = |w: &[f64]| -> f64 {
            (0..3).map(|i| (a[i] * (w[i] - c[i])).powi(2)).sum::<f64>().sqrt()
        };
        for step in 0..200 {
            let w = store.value(id).data().to_vec();
            for i in 0..3 {
                store.get_mut(id).grad.data_mut()[i] = a[i] * (w[i] - c[i]);
            }
            // Step size shrinks so the iterates settle instead of oscillating at ±lr.
            let lr = 0.1 * (1.0 - step as f64 / 200.0);
            opt.step(&mut store, lr);
        }
        assert!(grad_norm(store.value(id).data()) < 1e-3, "{:?}", store.value(id).data());
    }
}
