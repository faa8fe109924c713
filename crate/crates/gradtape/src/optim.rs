//! Adaptive moment estimation over plain tensors.

use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-tensor first/second moment estimates and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(shape: &[usize]) -> Self {
        Self { m: Tensor::zeros(shape), v: Tensor::zeros(shape), t: 0 }
    }

    /// Applies one update to `param` in place.
    pub fn step(&mut self, param: &mut Tensor<T>, grad: &Tensor<T>, cfg: &AdamConfig) {
        assert_eq!(param.shape(), grad.shape());
        assert_eq!(param.shape(), self.m.shape());
        self.t += 1;
        let b1 = T::lit(cfg.beta1);
        let b2 = T::lit(cfg.beta2);
        let one = T::one();
        let c1 = T::lit(1.0 - cfg.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - cfg.beta2.powi(self.t as i32));
        let lr = T::lit(cfg.lr);
        let eps = T::lit(cfg.eps);
        let m = self.m.data_mut();
        let v = self.v.data_mut();
        for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p = *p - lr * mhat / (vhat.sqrt() + eps);
        }
    }
}
