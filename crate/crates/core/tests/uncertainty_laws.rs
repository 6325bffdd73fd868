//! Monte-Carlo laws of the dropout estimator, checked against closed forms.

use proptest::prelude::*;
use uet_core::uncertainty::{dropout_pass, estimate_uncertainty};
use uet_core::{Eager, Pyramid, Rng, Tensor};

fn single(t: Tensor) -> Pyramid<Tensor> {
    Pyramid(vec![t])
}

#[test]
fn dropout_mean_of_constant_map() {
    let f = single(Tensor::full(&[1, 100, 1000], 1.0));
    let d = dropout_pass(&mut Eager, &f, 0.5, &Rng::new(21)).unwrap();
    let mean = d.0[0].data().iter().sum::<f64>() / 1e5;
    assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
}

#[test]
fn dropout_is_unbiased_per_element() {
    let values = [0.1, -0.25, 0.5, 1.0, -2.0, 3.5, 0.75, -0.1];
    let f = single(Tensor::new(&[2, 2, 2], values.to_vec()).unwrap());
    let trials = 100_000u64;
    let root = Rng::new(5);
    for p in [0.15, 0.5] {
        let mut acc = [0.0f64; 8];
        for k in 0..trials {
            let d = dropout_pass(&mut Eager, &f, p, &root.fork(k)).unwrap();
            for (a, v) in acc.iter_mut().zip(d.0[0].data()) {
                *a += v;
            }
        }
        for (a, f) in acc.iter().zip(values) {
            let m = a / trials as f64;
            assert!((m - f).abs() < 0.01 * f.abs(), "p {p}: mean {m} vs {f}");
        }
    }
}

/// Pooled per-element variance of `U_K` on a constant map of ones.
fn estimate_variance(n: usize, p: f64, trials: u64, seed: u64) -> f64 {
    let f = single(Tensor::full(&[1, 4, 4], 1.0));
    let ratios = vec![p; n];
    let root = Rng::new(seed);
    let (mut s, mut ss, mut count) = (0.0, 0.0, 0.0);
    for k in 0..trials {
        let u = estimate_uncertainty(&mut Eager, &f, &ratios, &root.fork(k)).unwrap();
        for &v in u.u_k.0[0].data() {
            s += v;
            ss += v * v;
            count += 1.0;
        }
    }
    let mean = s / count;
    ss / count - mean * mean
}

#[test]
fn variance_shrinks_as_one_over_n() {
    let p = 0.3;
    let v1 = estimate_variance(1, p, 10_000, 1);
    let v10 = estimate_variance(10, p, 10_000, 2);
    let ratio = v1 / v10;
    assert!((8.5..=11.5).contains(&ratio), "ratio {ratio}");
    // Bernoulli keep variable scaled by 1/(1-p) has variance p/(1-p).
    let law = |n: f64| p / (1.0 - p) / n;
    assert!((v1 / law(1.0) - 1.0).abs() < 0.1, "N=1 variance {v1}");
    assert!((v10 / law(10.0) - 1.0).abs() < 0.1, "N=10 variance {v10}");
}

#[test]
fn variance_law_with_schedule_ratios() {
    let ratios = [0.05, 0.10, 0.15, 0.20, 0.25];
    let f = single(Tensor::full(&[1, 4, 4], 2.0));
    let root = Rng::new(77);
    let (mut s, mut ss, mut count) = (0.0, 0.0, 0.0);
    for k in 0..10_000 {
        let u = estimate_uncertainty(&mut Eager, &f, &ratios, &root.fork(k)).unwrap();
        for &v in u.u_k.0[0].data() {
            s += v;
            ss += v * v;
            count += 1.0;
        }
    }
    let mean = s / count;
    let var = ss / count - mean * mean;
    let law = 4.0 * ratios.iter().map(|p| p / (1.0 - p)).sum::<f64>() / 25.0;
    assert!((var / law - 1.0).abs() < 0.1, "variance {var} vs {law}");
}

#[test]
fn masks_uncorrelated_across_scales() {
    let f = Pyramid(vec![Tensor::full(&[1, 8, 8], 1.0), Tensor::full(&[4, 4, 4], 1.0)]);
    let root = Rng::new(3);
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for k in 0..10_000 {
        let d = dropout_pass(&mut Eager, &f, 0.5, &root.fork(k)).unwrap();
        for (&x, &y) in d.0[0].data().iter().zip(d.0[1].data()) {
            sx += x;
            sy += y;
            sxx += x * x;
            syy += y * y;
            sxy += x * y;
            n += 1.0;
        }
    }
    let cov = sxy / n - (sx / n) * (sy / n);
    let vx = sxx / n - (sx / n).powi(2);
    let vy = syy / n - (sy / n).powi(2);
    let corr = cov / (vx * vy).sqrt();
    assert!(corr.abs() < 0.02, "corr {corr}");
}

#[test]
fn passes_use_fresh_masks() {
    let f = single(Tensor::full(&[1, 16, 16], 1.0));
    let u = estimate_uncertainty(&mut Eager, &f, &[0.5, 0.5], &Rng::new(4)).unwrap();
    // Two independent masks average to {0, 1, 2}; a shared mask would give only {0, 2}.
    assert!(u.u_k.0[0].data().iter().any(|&v| v == 1.0));
}

proptest! {
    #[test]
    fn same_seed_same_estimate(seed in any::<u64>(), p in 0.0f64..0.9, n in 1usize..6) {
        let mut r = Rng::new(seed ^ 0xabc);
        let f = Pyramid(vec![
            Tensor::from_fn(&[2, 4, 4], |_| r.normal()),
            Tensor::from_fn(&[2, 2, 2], |_| r.normal()),
        ]);
        let ratios = vec![p; n];
        let a = estimate_uncertainty(&mut Eager, &f, &ratios, &Rng::new(seed)).unwrap();
        let b = estimate_uncertainty(&mut Eager, &f, &ratios, &Rng::new(seed)).unwrap();
        prop_assert!(a.u_k.bit_eq(&b.u_k));
        prop_assert_eq!(a.u_k.shapes(), f.shapes());
    }

    #[test]
    fn zero_ratios_are_identity(seed in any::<u64>(), n in 1usize..8) {
        let mut r = Rng::new(seed);
        let f = single(Tensor::from_fn(&[3, 4, 4], |_| r.normal()));
        let u = estimate_uncertainty(&mut Eager, &f, &vec![0.0; n], &Rng::new(seed)).unwrap();
        prop_assert!(u.u_k.bit_eq(&f));
    }
}
