//! Monte-Carlo dropout estimate of knowledge uncertainty.
//!
//! The estimate is taken on an already computed pyramid: `N` inverted-dropout
//! copies are drawn, each with its own ratio from a [`RatioSchedule`], and
//! averaged into `U_K`. The distillation target is then `U_K + F` (residual)
//! or `U_K` alone.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{invalid_arg, Error, Result};
use crate::model::Pyramid;
use crate::rng::Rng;
use crate::tensor::{Exec, Tensor};

/// How the `N` dropout ratios are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RatioStrategy {
    /// Every pass uses the fixed ratio 0.15.
    Fixed,
    /// `base + step * i` for pass `i`.
    Arithmetic,
    /// The arithmetic ratios shifted up by `epoch_growth * epoch`.
    EpochGrowing,
}

impl RatioStrategy {
    pub const ALL: [RatioStrategy; 3] = [Self::Fixed, Self::Arithmetic, Self::EpochGrowing];

    /// Single-letter tag used in reports.
    pub fn letter(self) -> char {
        match self {
            Self::Fixed => 'A',
            Self::Arithmetic => 'B',
            Self::EpochGrowing => 'C',
        }
    }
}

pub const FIXED_RATIO: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatioSchedule {
    pub strategy: RatioStrategy,
    pub n: usize,
    pub base: f64,
    pub step: f64,
    pub epoch_growth: f64,
    pub clamp_max: f64,
}

impl Default for RatioSchedule {
    fn default() -> Self {
        RatioSchedule {
            strategy: RatioStrategy::Arithmetic,
            n: 5,
            base: 0.05,
            step: 0.05,
            epoch_growth: 0.025,
            clamp_max: 0.95,
        }
    }
}

/// Rounds to the nearest multiple of 1e-12 so that sums such as
/// `0.05 + 0.05 * 2` come out as the literal `0.15`.
fn snap(v: f64) -> f64 {
    libm::round(v * 1e12) / 1e12
}

impl RatioSchedule {
    pub fn new(strategy: RatioStrategy, n: usize) -> Self {
        RatioSchedule {
            strategy,
            n,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidConfig("ratio schedule needs n >= 1".into()));
        }
        if !(self.clamp_max >= 0.0 && self.clamp_max < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "clamp_max must lie in [0, 1), got {}",
                self.clamp_max
            )));
        }
        for (name, v) in [("base", self.base), ("step", self.step), ("epoch_growth", self.epoch_growth)] {
            if !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be finite")));
            }
        }
        Ok(())
    }

    /// Ratios for the `n` passes at `epoch`, each in `[0, clamp_max]`.
    pub fn ratios(&self, epoch: usize) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let raw = match self.strategy {
                    RatioStrategy::Fixed => FIXED_RATIO,
                    RatioStrategy::Arithmetic => self.base + self.step * i as f64,
                    RatioStrategy::EpochGrowing => {
                        self.base + self.step * i as f64 + self.epoch_growth * epoch as f64
                    }
                };
                snap(raw).clamp(0.0, self.clamp_max)
            })
            .collect()
    }
}

/// Free-function form of [`RatioSchedule::ratios`].
pub fn schedule_ratios(s: &RatioSchedule, epoch: usize) -> Vec<f64> {
    s.ratios(epoch)
}

fn check_ratio(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(invalid_arg("dropout", format!("ratio must lie in [0, 1), got {p}")));
    }
    Ok(())
}

/// Inverted-dropout mask: `1/(1-p)` with probability `1-p`, else `0`.
pub fn dropout_mask(shape: &[usize], p: f64, rng: &mut Rng) -> Result<Tensor> {
    check_ratio(p)?;
    let keep = 1.0 / (1.0 - p);
    Ok(Tensor::from_fn(shape, |_| if rng.uniform() < p { 0.0 } else { keep }))
}

/// One dropout copy of a pyramid. Scale `s` draws its mask from `rng.fork(s)`.
///
/// `p == 0` returns the input handles unchanged.
pub fn dropout_pass<E: Exec>(e: &mut E, f: &Pyramid<E::Val>, p: f64, rng: &Rng) -> Result<Pyramid<E::Val>> {
    check_ratio(p)?;
    if p == 0.0 {
        return Ok(f.clone());
    }
    let mut out = Vec::with_capacity(f.len());
    for (s, level) in f.iter().enumerate() {
        let shape = e.value(level).shape().to_vec();
        let mask = dropout_mask(&shape, p, &mut rng.fork(s as u64))?;
        let mask = e.constant(mask);
        out.push(e.mul(level, &mask)?);
    }
    Ok(Pyramid(out))
}

/// `U_K` together with the ratios that produced it.
#[derive(Clone, Debug)]
pub struct UncertaintyEstimate<V> {
    pub u_k: Pyramid<V>,
    pub n_used: usize,
    pub ratios_used: Vec<f64>,
}

/// Mean of `ratios.len()` dropout copies; pass `i` uses `rng.fork(i)`.
///
/// The mean is accumulated as a running mean, so identical copies (all
/// ratios zero) reproduce `f` exactly.
pub fn estimate_uncertainty<E: Exec>(
    e: &mut E,
    f: &Pyramid<E::Val>,
    ratios: &[f64],
    rng: &Rng,
) -> Result<UncertaintyEstimate<E::Val>> {
    if ratios.is_empty() {
        return Err(invalid_arg("estimate_uncertainty", "no dropout ratios given"));
    }
    ratios.iter().try_for_each(|&p| check_ratio(p))?;
    let mut mean = dropout_pass(e, f, ratios[0], &rng.fork(0))?;
    for (i, &p) in ratios.iter().enumerate().skip(1) {
        let copy = dropout_pass(e, f, p, &rng.fork(i as u64))?;
        let w = 1.0 / (i + 1) as f64;
        let mut next = Vec::with_capacity(mean.len());
        for (m, x) in mean.iter().zip(copy.iter()) {
            let d = e.sub(x, m)?;
            let d = e.scale(&d, w);
            next.push(e.add(m, &d)?);
        }
        mean = Pyramid(next);
    }
    Ok(UncertaintyEstimate {
        u_k: mean,
        n_used: ratios.len(),
        ratios_used: ratios.to_vec(),
    })
}

/// `U_K + F` when `residual`, else `U_K`. `halve` rescales the residual sum
/// by 0.5 so its magnitude matches `F`.
pub fn combine_residual<E: Exec>(
    e: &mut E,
    u: &UncertaintyEstimate<E::Val>,
    f: &Pyramid<E::Val>,
    residual: bool,
    halve: bool,
) -> Result<Pyramid<E::Val>> {
    if u.u_k.len() != f.len() {
        return Err(invalid_arg(
            "combine_residual",
            format!("estimate has {} scales, pyramid {}", u.u_k.len(), f.len()),
        ));
    }
    let mut out = Vec::with_capacity(f.len());
    for (uk, x) in u.u_k.iter().zip(f.iter()) {
        let us = e.value(uk).shape();
        let xs = e.value(x).shape();
        if us != xs {
            return Err(Error::ShapeMismatch {
                op: "combine_residual",
                expected: xs.to_vec(),
                found: us.to_vec(),
            });
        }
        if !residual {
            out.push(uk.clone());
            continue;
        }
        let sum = e.add(uk, x)?;
        out.push(if halve { e.scale(&sum, 0.5) } else { sum });
    }
    Ok(Pyramid(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Eager;
    use alloc::vec;

    fn pyr(seed: u64) -> Pyramid<Tensor> {
        let mut rng = Rng::new(seed);
        Pyramid(vec![
            Tensor::from_fn(&[2, 4, 4], |_| rng.normal()),
            Tensor::from_fn(&[2, 2, 2], |_| rng.normal()),
        ])
    }

    #[test]
    fn reference_schedules_exact() {
        let a = RatioSchedule::new(RatioStrategy::Fixed, 5);
        assert_eq!(a.ratios(0), vec![0.15; 5]);
        assert_eq!(a.ratios(17), vec![0.15; 5]);
        let b = RatioSchedule::new(RatioStrategy::Arithmetic, 5);
        assert_eq!(b.ratios(3), vec![0.05, 0.10, 0.15, 0.20, 0.25]);
        let c = RatioSchedule::new(RatioStrategy::EpochGrowing, 5);
        assert_eq!(c.ratios(10), vec![0.30, 0.35, 0.40, 0.45, 0.50]);
        assert_eq!(c.ratios(0), b.ratios(0));
    }

    #[test]
    fn late_epochs_clamp() {
        let c = RatioSchedule::new(RatioStrategy::EpochGrowing, 15);
        let r = c.ratios(1000);
        assert!(r.iter().all(|&p| p == 0.95));
        let b = RatioSchedule::new(RatioStrategy::Arithmetic, 30);
        assert!(b.ratios(0).iter().all(|&p| p <= 0.95));
    }

    #[test]
    fn bad_schedules_rejected() {
        assert!(RatioSchedule::new(RatioStrategy::Fixed, 0).validate().is_err());
        let mut s = RatioSchedule::default();
        s.clamp_max = 1.0;
        assert!(s.validate().is_err());
        assert!(RatioSchedule::default().validate().is_ok());
    }

    #[test]
    fn ratio_one_rejected() {
        let f = pyr(1);
        assert!(dropout_pass(&mut Eager, &f, 1.0, &Rng::new(0)).is_err());
        assert!(dropout_pass(&mut Eager, &f, -0.1, &Rng::new(0)).is_err());
        assert!(estimate_uncertainty(&mut Eager, &f, &[], &Rng::new(0)).is_err());
    }

    #[test]
    fn half_dropout_on_ones() {
        let f = Pyramid(vec![Tensor::full(&[1, 8, 8], 1.0)]);
        let d = dropout_pass(&mut Eager, &f, 0.5, &Rng::new(3)).unwrap();
        assert!(d.0[0].data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn zero_ratios_collapse() {
        let f = pyr(2);
        let u = estimate_uncertainty(&mut Eager, &f, &[0.0; 5], &Rng::new(9)).unwrap();
        assert!(u.u_k.bit_eq(&f));
        let both = combine_residual(&mut Eager, &u, &f, true, false).unwrap();
        for (b, x) in both.iter().zip(f.iter()) {
            let doubled = crate::tensor::ops::scale(x, 2.0);
            assert!(b.bit_eq(&doubled));
        }
        let alone = combine_residual(&mut Eager, &u, &f, false, false).unwrap();
        assert!(alone.bit_eq(&f));
        let halved = combine_residual(&mut Eager, &u, &f, true, true).unwrap();
        assert!(halved.bit_eq(&f));
    }

    #[test]
    fn residual_is_u_plus_f() {
        let f = pyr(4);
        let u = estimate_uncertainty(&mut Eager, &f, &[0.1, 0.3], &Rng::new(5)).unwrap();
        let c = combine_residual(&mut Eager, &u, &f, true, false).unwrap();
        for ((c, x), uk) in c.iter().zip(f.iter()).zip(u.u_k.iter()) {
            let back = crate::tensor::ops::sub(c, x).unwrap();
            assert!(back.max_abs_diff(uk).unwrap() < 1e-12);
        }
    }

    #[test]
    fn single_pass_values() {
        let f = pyr(6);
        let u = estimate_uncertainty(&mut Eager, &f, &[0.5], &Rng::new(1)).unwrap();
        for (uk, x) in u.u_k.iter().zip(f.iter()) {
            for (&a, &b) in uk.data().iter().zip(x.data()) {
                assert!(a == 0.0 || a == 2.0 * b);
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let f = pyr(7);
        let u = estimate_uncertainty(&mut Eager, &f, &[0.2], &Rng::new(1)).unwrap();
        let g = Pyramid(vec![f.0[0].clone()]);
        assert!(combine_residual(&mut Eager, &u, &g, true, false).is_err());
        let h = Pyramid(vec![f.0[0].clone(), Tensor::zeros(&[2, 4, 4])]);
        assert!(combine_residual(&mut Eager, &u, &h, true, false).is_err());
    }

    #[test]
    fn estimate_is_deterministic() {
        let f = pyr(8);
        let r = [0.05, 0.1, 0.15, 0.2, 0.25];
        let a = estimate_uncertainty(&mut Eager, &f, &r, &Rng::new(11)).unwrap();
        let b = estimate_uncertainty(&mut Eager, &f, &r, &Rng::new(11)).unwrap();
        assert!(a.u_k.bit_eq(&b.u_k));
        let c = estimate_uncertainty(&mut Eager, &f, &r, &Rng::new(12)).unwrap();
        assert!(!a.u_k.bit_eq(&c.u_k));
        assert_eq!(a.ratios_used, r.to_vec());
        assert_eq!(a.n_used, 5);
    }
}
