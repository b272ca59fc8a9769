//! Adam with a linear warmup/decay learning-rate schedule.

use alloc::vec::Vec;

use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Matrix, Scalar};

/// Linear warmup to `peak` over `warmup` steps, then linear decay to zero
/// at `total` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LinearSchedule {
    /// Learning rate for the 1-based optimizer step `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if self.warmup > 0 && step <= self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        if self.total == 0 || self.total <= self.warmup {
            return self.peak;
        }
        let remaining = self.total.saturating_sub(step) as f64;
        // one extra step keeps the final update non-zero
        self.peak * (remaining + 1.0) / ((self.total - self.warmup) as f64 + 1.0)
    }
}

pub struct Adam<T> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.ids().map(|id| Matrix::zeros(store.get(id).rows(), store.get(id).cols())).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// One update. `grads[i]` belongs to parameter `i`; `None` entries are
    /// parameters untouched by this step and are left alone.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Matrix<T>>], lr: f64) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        self.step += 1;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let c1 = T::lit(1.0 - libm_powi(self.beta1, self.step));
        let c2 = T::lit(1.0 - libm_powi(self.beta2, self.step));
        let lr = T::lit(lr);
        let eps = T::lit(self.eps);
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let param = store.get_mut(ParamId(i));
            let (m, v) = (self.m[i].as_mut_slice(), self.v[i].as_mut_slice());
            for (((p, &g), m), v) in param.as_mut_slice().iter_mut().zip(grad.as_slice()).zip(m).zip(v) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

fn libm_powi(base: f64, exp: usize) -> f64 {
    let mut out = 1.0;
    for _ in 0..exp.min(100_000) {
        out *= base;
        if out == 0.0 {
            break;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn schedule_shape() {
        let s = LinearSchedule { peak: 1.0, warmup: 2, total: 10 };
        assert_eq!(s.lr(1), 0.5);
        assert_eq!(s.lr(2), 1.0);
        assert!(s.lr(3) < 1.0 && s.lr(3) > s.lr(4));
        assert!(s.lr(10) > 0.0);
        let flat = LinearSchedule { peak: 0.1, warmup: 0, total: 0 };
        assert_eq!(flat.lr(123), 0.1);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Matrix::from_vec(1, 2, vec![3.0, -2.0]));
        let mut opt = Adam::new(&store);
        for _ in 0..500 {
            let g = store.get(id).map(|x| 2.0 * x);
            opt.step(&mut store, &[Some(g)], 0.05);
        }
        assert!(store.get(id).max_abs() < 1e-2);
        assert_eq!(opt.steps(), 500);
    }
}
