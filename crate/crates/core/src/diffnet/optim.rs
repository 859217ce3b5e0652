use serde::{Deserialize, Serialize};

use super::params::{GradSet, ParamSet};

/// Rescale `grads` so its global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut GradSet, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam minimiser. Moments are created lazily on the first step.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: ParamSet,
    pub v: ParamSet,
    pub t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, m: ParamSet::new(), v: ParamSet::new(), t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &GradSet) {
        if self.m.is_empty() {
            self.m = params.zeros_like();
            self.v = params.zeros_like();
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let iter = params.iter_mut().zip(grads.values()).zip(self.m.iter_mut()).zip(self.v.iter_mut());
        for ((((_, p), g), (_, m)), (_, v)) in iter {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let step = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                *p -= step;
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn clipping_caps_norm() {
        let mut g = ParamSet::new();
        g.insert("a", array![[3.0, 4.0]]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.norm() - 1.0).abs() < 1e-15);
        assert_eq!(clip_global_norm(&mut g, 10.0), g.norm());
    }

    #[test]
    fn zero_gradient_is_a_noop_on_fresh_state() {
        let mut p = ParamSet::new();
        p.insert("a", array![[0.25, -1.5]]);
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut p, &before.zeros_like());
        assert!(p.bit_eq(&before));
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = ParamSet::new();
        p.insert("a", array![[1.0, 1.0]]);
        let mut g = ParamSet::new();
        g.insert("a", array![[2.0, -0.5]]);
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        opt.step(&mut p, &g);
        let a = p.get("a").unwrap();
        assert!((a[[0, 0]] - 0.9).abs() < 1e-7);
        assert!((a[[0, 1]] - 1.1).abs() < 1e-7);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = ParamSet::new();
        p.insert("x", array![[5.0]]);
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        for _ in 0..500 {
            let mut g = p.clone();
            g.scale(2.0);
            opt.step(&mut p, &g);
        }
        assert!(p.get("x").unwrap()[[0, 0]].abs() < 1e-2);
    }
}
