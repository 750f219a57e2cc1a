//! Adam with global gradient-norm clipping, and the learning-rate schedule.

use std::f64::consts::PI;

use crate::config::Schedule;
use crate::diffcore::ParamSet;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Cosine decay `lr_final + (lr_init - lr_final)(1 + cos(pi t / T)) / 2`,
/// with `t` clamped to `[0, T]`.
pub fn lr_schedule(t: usize, total: usize, lr_init: f64, lr_final: f64) -> f64 {
    if total == 0 {
        return lr_init;
    }
    let x = t.min(total) as f64 / total as f64;
    lr_final + 0.5 * (lr_init - lr_final) * (1.0 + (PI * x).cos())
}

pub fn scheduled_lr(kind: Schedule, t: usize, total: usize, lr_init: f64, lr_final: f64) -> f64 {
    match kind {
        Schedule::Cosine => lr_schedule(t, total, lr_init, lr_final),
        Schedule::Constant => lr_init,
    }
}

/// Per-tensor moment estimates. Each tensor keeps its own step count so that
/// tensors excluded from a step (policy freeze) are not bias-corrected as if
/// they had been updated.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: Vec<u64>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let sizes: Vec<usize> = params.tensors().iter().map(|t| t.numel()).collect();
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: vec![0; sizes.len()],
        }
    }

    /// Applies one step to tensors with `mask[i]`, clipping their joint
    /// gradient norm to `max_norm`. Clears every gradient afterwards.
    /// Returns the pre-clip norm.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64, mask: &[bool], max_norm: f64) -> f64 {
        let norm_sq: f64 = params
            .tensors()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .filter_map(|(t, _)| t.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum();
        let norm = norm_sq.sqrt();
        let scale = if norm > max_norm { max_norm / norm } else { 1.0 };
        for (i, t) in params.tensors_mut().iter_mut().enumerate() {
            if !mask[i] {
                continue;
            }
            let Some(g) = t.grad.take() else { continue };
            self.t[i] += 1;
            let step = self.t[i] as i32;
            let bc1 = 1.0 - ADAM_BETA1.powi(step);
            let bc2 = 1.0 - ADAM_BETA2.powi(step);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = t.data_mut();
            for j in 0..data.len() {
                let gj = g[j] * scale;
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                data[j] -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
            t.grad = Some(g);
        }
        params.zero_grad();
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_schedule(0, 800, 5e-5, 1e-7), 5e-5);
        assert!((lr_schedule(800, 800, 5e-5, 1e-7) - 1e-7).abs() < 1e-20);
        assert!((lr_schedule(400, 800, 5e-5, 1e-7) - 2.505e-5).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for t in 0..=800 {
            let lr = lr_schedule(t, 800, 5e-5, 1e-7);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn masked_tensors_untouched() {
        let mut ps = ParamSet::new();
        ps.push("a", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        ps.push("b", Tensor::new(vec![1], vec![3.0]).unwrap().with_grad());
        ps.get_mut(0).grad = Some(vec![1.0, -1.0]);
        ps.get_mut(1).grad = Some(vec![1.0]);
        let mut adam = Adam::new(&ps);
        adam.step(&mut ps, 0.1, &[false, true], 1.0);
        assert_eq!(ps.get(0).data(), &[1.0, 2.0]);
        assert!((ps.get(1).data()[0] - 2.9).abs() < 1e-6);
        assert_eq!(adam.t, vec![0, 1]);
        assert!(ps.get(0).grad.as_ref().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut ps = ParamSet::new();
        ps.push("a", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        ps.get_mut(0).grad = Some(vec![0.0, 0.0]);
        let mut adam = Adam::new(&ps);
        adam.step(&mut ps, 0.1, &[true], 1.0);
        assert_eq!(ps.get(0).data(), &[1.0, 2.0]);
    }
}
