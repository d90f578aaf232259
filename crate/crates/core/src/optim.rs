//! Adaptive-moment optimizer with decoupled weight decay, global-norm
//! clipping and the warmup + cosine learning-rate schedule.

use rayon::prelude::*;

use crate::model::{Params, Real, Trainable};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

pub fn warmup_steps(total_steps: u64, warmup_ratio: f64) -> u64 {
    ((warmup_ratio * total_steps as f64).round() as u64).max(1)
}

/// Linear warmup to `lr_peak`, then cosine decay to zero at `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, lr_peak: f64, warmup_ratio: f64) -> f64 {
    let warmup = warmup_steps(total_steps, warmup_ratio);
    if step < warmup {
        return lr_peak * (step + 1) as f64 / warmup as f64;
    }
    let progress = if total_steps <= warmup {
        1.0
    } else {
        ((step - warmup) as f64 / (total_steps - warmup) as f64).min(1.0)
    };
    lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Global L2 norm over the trainable groups.
pub fn grad_norm(grads: &Params<f64>, trainable: Trainable) -> f64 {
    grads
        .tensors()
        .into_iter()
        .filter(|(_, g, _)| trainable.contains(*g))
        .map(|(_, _, t)| t.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales trainable gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Params<f64>, max_norm: f64, trainable: Trainable) -> f64 {
    let norm = grad_norm(grads, trainable);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for (_, g, t) in grads.tensors_mut() {
            if trainable.contains(g) {
                t.iter_mut().for_each(|x| *x *= scale);
            }
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Params<f64>,
    pub v: Params<f64>,
}

impl AdamW {
    pub fn new<T: Real>(params: &Params<T>, weight_decay: f64) -> Self {
        AdamW {
            weight_decay,
            t: 0,
            m: Params::zeros_like(params),
            v: Params::zeros_like(params),
        }
    }

    /// One update of every trainable group. Frozen groups are left untouched.
    pub fn step<T: Real>(&mut self, params: &mut Params<T>, grads: &Params<f64>, lr: f64, trainable: Trainable) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let decay = 1.0 - lr * self.weight_decay;
        let groups = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for ((((_, group, p), (_, _, g)), (_, _, m)), (_, _, v)) in groups {
            if !trainable.contains(group) {
                continue;
            }
            p.par_iter_mut()
                .zip(g.par_iter())
                .zip(m.par_iter_mut())
                .zip(v.par_iter_mut())
                .with_min_len(4096)
                .for_each(|(((p, &g), m), v)| {
                    *m = BETA1 * *m + (1.0 - BETA1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + EPS);
                    *p = T::from_f64(p.to_f64() * decay - lr * update);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_default_config() {
        let (peak, ratio, total) = (5e-5, 0.01, 1000);
        assert_eq!(warmup_steps(total, ratio), 10);
        assert_eq!(lr_at(10, total, peak, ratio), 5e-5);
        assert_eq!(lr_at(9, total, peak, ratio), 5e-5);
        assert!(lr_at(0, total, peak, ratio) <= peak / 10.0);
        assert!(lr_at(total, total, peak, ratio) < 1e-12);
        // midpoint of the decay segment
        assert!((lr_at(505, total, peak, ratio) - peak / 2.0).abs() < 1e-18);
        let max = (0..=total).map(|s| lr_at(s, total, peak, ratio)).fold(0.0, f64::max);
        assert_eq!(max, peak);
    }

    #[test]
    fn schedule_degenerate_totals() {
        assert_eq!(lr_at(0, 1, 1.0, 0.0), 1.0);
        assert_eq!(warmup_steps(0, 0.5), 1);
        assert!(lr_at(1, 1, 1.0, 0.0) < 1e-12);
    }

    fn params(e: Vec<f64>, d1: Vec<f64>) -> Params<f64> {
        Params {
            embedding: e,
            backbone: Some((vec![0.5], vec![0.5])),
            dense1: d1,
            dense2: vec![0.0],
        }
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = params(vec![3.0, 0.0], vec![4.0]);
        let t = Trainable::default();
        let before = clip_grad_norm(&mut g, 1.0, t);
        assert_eq!(before, 5.0);
        assert!(grad_norm(&g, t) <= 1.0 + 1e-9);
        // frozen backbone gradient is neither counted nor scaled
        assert_eq!(g.backbone.as_ref().unwrap().0, vec![0.5]);
    }

    #[test]
    fn first_step_moves_by_lr_and_decays() {
        let mut p = params(vec![1.0, -2.0], vec![0.0]);
        let g = params(vec![0.1, -0.3], vec![0.0]);
        let mut opt = AdamW::new(&p, 0.01);
        opt.step(&mut p, &g, 0.1, Trainable::default());
        // bias-corrected first step is sign(g) * lr (up to eps)
        assert!((p.embedding[0] - (1.0 * (1.0 - 0.001) - 0.1)).abs() < 1e-6);
        assert!((p.embedding[1] - (-2.0 * (1.0 - 0.001) + 0.1)).abs() < 1e-6);
        assert_eq!(p.dense1, vec![0.0]);
        assert_eq!(p.backbone.as_ref().unwrap().0, vec![0.5]);
        assert_eq!(opt.t, 1);
    }
}
