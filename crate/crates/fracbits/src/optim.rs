//! In-place parameter updates: classical-momentum SGD for weights and Adam
//! for the bitwidth variables.
//!
//! Bitwidth gradients are dominated by the size-loss term, whose magnitude is
//! proportional to a layer's weight count and therefore spans two orders of
//! magnitude across layers at this scale. Adam's per-parameter normalization
//! turns those into comparable step sizes, so one learning rate moves every
//! layer; plain SGD cannot serve both the largest and smallest layer at once.

use std::collections::HashMap;

use crate::graph::{Graph, NodeId};

/// One SGD step with classical momentum:
/// v <- momentum * v + grad; p <- p - lr * v.
pub fn sgd_step(param: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    debug_assert_eq!(param.len(), grad.len());
    debug_assert_eq!(param.len(), velocity.len());
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

#[derive(Debug)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: HashMap<usize, Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdMomentum {
            lr,
            momentum,
            velocity: HashMap::new(),
        }
    }

    /// Apply one step to each listed parameter that has a gradient.
    pub fn step(&mut self, graph: &mut Graph, params: &[NodeId]) {
        for &id in params {
            if graph.grad(id).is_none() {
                continue;
            }
            let len = graph.value(id).len();
            let vel = self.velocity.entry(id.0).or_insert_with(|| vec![0.0; len]);
            let tensor = graph.value_mut(id);
            let (data, grad) = {
                // grad buffer is separate from data; split via raw copy of grad
                let g = tensor.grad().expect("checked").to_vec();
                (tensor.data_mut(), g)
            };
            sgd_step(data, &grad, vel, self.lr, self.momentum);
        }
    }
}

#[derive(Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: HashMap<usize, Vec<f64>>,
    v: HashMap<usize, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn step(&mut self, graph: &mut Graph, params: &[NodeId]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for &id in params {
            if graph.grad(id).is_none() {
                continue;
            }
            let len = graph.value(id).len();
            let m = self.m.entry(id.0).or_insert_with(|| vec![0.0; len]);
            let v = self.v.entry(id.0).or_insert_with(|| vec![0.0; len]);
            let tensor = graph.value_mut(id);
            let grad = tensor.grad().expect("checked").to_vec();
            for i in 0..len {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                tensor.data_mut()[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_step() {
        let mut p = vec![1.0, 2.0];
        let mut v = vec![0.0, 0.0];
        sgd_step(&mut p, &[0.5, -1.0], &mut v, 0.1, 0.0);
        assert_eq!(p, vec![1.0 - 0.05, 2.0 + 0.1]);
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut p = vec![3.0, -4.0];
        let mut v = vec![0.0, 0.0];
        sgd_step(&mut p, &[0.0, 0.0], &mut v, 0.5, 0.9);
        assert_eq!(p, vec![3.0, -4.0]);
    }

    #[test]
    fn momentum_matches_hand_unrolled_recurrence() {
        let (lr, mu, g) = (0.1, 0.9, 2.0);
        let mut p = vec![1.0];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[g], &mut v, lr, mu);
        sgd_step(&mut p, &[g], &mut v, lr, mu);
        // v1 = g; p1 = 1 - lr*g; v2 = mu*g + g; p2 = p1 - lr*v2.
        let v1 = g;
        let p1 = 1.0 - lr * v1;
        let v2 = mu * v1 + g;
        let p2 = p1 - lr * v2;
        assert!((p[0] - p2).abs() < 1e-15);
        assert!((v[0] - v2).abs() < 1e-15);
    }

    #[test]
    fn adam_steps_are_bounded_by_lr() {
        use crate::tensor::Tensor;
        let mut g = Graph::new();
        let p = g.param(Tensor::scalar(5.0));
        // Fake a gradient directly.
        g.value_mut(p).grad_or_init()[0] = 123.0;
        let mut adam = Adam::new(0.02);
        let before = g.value(p).scalar_value();
        adam.step(&mut g, &[p]);
        let after = g.value(p).scalar_value();
        // First Adam step is ~lr regardless of gradient magnitude.
        assert!((before - after).abs() <= 0.02 * 1.01);
        assert!((before - after) > 0.0);
    }
}
