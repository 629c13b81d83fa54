//! Adam with bias-corrected moment estimates.

use super::gradcheck::Trainable;
use crate::model::Float;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update from the gradients accumulated in `model`.
    pub fn step<T: Float, M: Trainable<T> + ?Sized>(&mut self, model: &mut M) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        model.visit_params(&mut |p| {
            if ms.len() <= idx {
                ms.push(vec![0.0; p.value.len()]);
                vs.push(vec![0.0; p.value.len()]);
            }
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            for i in 0..p.value.len() {
                let g = p.grad[i].as_f64();
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                p.value[i] = T::from_f64_lossy(p.value[i].as_f64() - update);
            }
            idx += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::layers::Param;
    use crate::model::{FeatureMap, HeadOutputs};

    /// Single parameter vector standing in for a network.
    struct Quadratic(Param<f64>);

    impl Trainable<f64> for Quadratic {
        fn forward_train(&mut self, _: &FeatureMap<f64>) -> HeadOutputs<f64> {
            unreachable!()
        }
        fn backward(&mut self, _: Option<&FeatureMap<f64>>, _: &FeatureMap<f64>) {}
        fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
            f(&mut self.0)
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut q = Quadratic(Param::filled(vec![3], 1.0));
        q.0.grad = vec![0.5, -2.0, 0.0];
        let mut adam = Adam::new(0.001, 0.9, 0.999, 1e-8);
        adam.step(&mut q);
        // bias-corrected first step is lr * g / (|g| + eps)
        assert!((q.0.value[0] - (1.0 - 0.001)).abs() < 1e-9);
        assert!((q.0.value[1] - (1.0 + 0.001)).abs() < 1e-9);
        assert_eq!(q.0.value[2], 1.0);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut q = Quadratic(Param::filled(vec![2], 0.0));
        let target = [3.0, -1.5];
        let mut adam = Adam::new(0.05, 0.9, 0.999, 1e-8);
        for _ in 0..2000 {
            for i in 0..2 {
                q.0.grad[i] = 2.0 * (q.0.value[i] - target[i]);
            }
            adam.step(&mut q);
        }
        for i in 0..2 {
            assert!((q.0.value[i] - target[i]).abs() < 1e-3);
        }
    }
}
