//! SGD with momentum and Adam over an ordered parameter list.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescales the gradient when its global L2 norm exceeds this value.
    pub max_grad_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimizerKind::SgdMomentum,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
        }
    }
}

impl OptimConfig {
    pub fn of(kind: OptimizerKind) -> Self {
        OptimConfig { kind, ..Self::default() }
    }
}

/// Optimizer state. The parameter list passed to [`Optimizer::step`] must
/// keep the same order and shapes across calls.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimConfig) -> Self {
        Optimizer {
            cfg,
            first: Vec::new(),
            second: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update with learning rate `lr`. Parameters that are frozen or
    /// received no gradient are left untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], lr: f64) -> Result<()> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::InvalidConfig("learning rate must be finite and non-negative".into()));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            if self.cfg.kind == OptimizerKind::Adam {
                self.second = self.first.clone();
            }
        }
        if self.first.len() != params.len() {
            return Err(Error::InvalidConfig("parameter list changed between steps".into()));
        }
        let mut sq = 0.0;
        for g in params.iter().filter(|p| p.requires_grad()).filter_map(|p| p.grad()) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "optimizer step" });
            }
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
        let norm = libm::sqrt(sq);
        let clip = match self.cfg.max_grad_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.t += 1;
        let c = self.cfg;
        let (bc1, bc2) = (
            1.0 - libm::pow(c.beta1, self.t as f64),
            1.0 - libm::pow(c.beta2, self.t as f64),
        );
        for (i, p) in params.iter_mut().enumerate() {
            if !p.requires_grad() {
                continue;
            }
            let Some(mut grad) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            if clip != 1.0 {
                grad.iter_mut().for_each(|g| *g *= clip);
            }
            let m = &mut self.first[i];
            let data = p.data_mut();
            match c.kind {
                OptimizerKind::SgdMomentum => {
                    for ((w, v), g) in data.iter_mut().zip(m.iter_mut()).zip(&grad) {
                        *v = c.momentum * *v + g;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::Adam => {
                    let s = &mut self.second[i];
                    for (((w, m), s), g) in data.iter_mut().zip(m.iter_mut()).zip(s.iter_mut()).zip(&grad) {
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *s = c.beta2 * *s + (1.0 - c.beta2) * g * g;
                        let mhat = *m / bc1;
                        let shat = *s / bc2;
                        *w -= lr * mhat / (libm::sqrt(shat) + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base` at step 0 to 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total)) as f64 / total as f64;
    base * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: &[f64]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap().with_requires_grad(true)
    }

    #[test]
    fn sgd_momentum_by_hand() {
        let mut p = param(&[1.0, -2.0]);
        let mut opt = Optimizer::new(OptimConfig::default());
        p.accumulate_grad(&[0.5, 1.0]).unwrap();
        opt.step(&mut [&mut p], 0.1).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.05, -2.0 - 0.1]);
        // velocity 0.9*0.5+0.5 = 0.95, 0.9*1+1 = 1.9
        opt.step(&mut [&mut p], 0.1).unwrap();
        let want = [0.95 - 0.1 * 0.95, -2.1 - 0.1 * 1.9];
        assert!((p.data()[0] - want[0]).abs() < 1e-15 && (p.data()[1] - want[1]).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        let mut p = param(&[0.0, 0.0]);
        p.accumulate_grad(&[3.0, -0.01]).unwrap();
        let mut opt = Optimizer::new(OptimConfig::of(OptimizerKind::Adam));
        opt.step(&mut [&mut p], 0.01).unwrap();
        assert!((p.data()[0] + 0.01).abs() < 1e-8);
        assert!((p.data()[1] - 0.01).abs() < 1e-5);
    }

    #[test]
    fn frozen_and_gradless_untouched() {
        let mut frozen = Tensor::full(&[2], 1.0);
        let mut idle = param(&[4.0]);
        let mut opt = Optimizer::new(OptimConfig::default());
        opt.step(&mut [&mut frozen, &mut idle], 1.0).unwrap();
        assert_eq!(frozen.data(), &[1.0, 1.0]);
        assert_eq!(idle.data(), &[4.0]);
    }

    #[test]
    fn clipping_rescales_to_max_norm() {
        let mut p = param(&[0.0, 0.0]);
        p.accumulate_grad(&[3.0, 4.0]).unwrap();
        let cfg = OptimConfig {
            momentum: 0.0,
            max_grad_norm: Some(1.0),
            ..OptimConfig::default()
        };
        Optimizer::new(cfg).step(&mut [&mut p], 1.0).unwrap();
        assert!((p.data()[0] + 0.6).abs() < 1e-15 && (p.data()[1] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.05, 0, 100), 0.05);
        assert!(cosine_lr(0.05, 100, 100).abs() < 1e-18);
        assert!((cosine_lr(0.05, 50, 100) - 0.025).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = param(&[1.0]);
        p.accumulate_grad(&[f64::NAN]).unwrap();
        let mut opt = Optimizer::new(OptimConfig::default());
        assert!(opt.step(&mut [&mut p], 0.1).is_err());
    }
}
