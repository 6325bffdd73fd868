use proptest::prelude::*;
use uet_core::tensor::{compare_gradients, gradcheck, ops};
use uet_core::{Eager, Exec, Graph, Rng, Tensor};

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut r = Rng::new(seed);
    Tensor::from_fn(shape, |_| r.normal())
}

/// Normal samples pushed away from zero so kinks (relu, |x|) are not straddled.
fn randn_away(shape: &[usize], seed: u64) -> Tensor {
    let mut r = Rng::new(seed);
    Tensor::from_fn(shape, |_| {
        let v = r.normal();
        v + 0.2 * v.signum()
    })
}

/// Direct summation over the zero-padded input, written independently of the kernel.
fn conv_oracle(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let at = |c: usize, y: isize, xx: isize| -> f64 {
        if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
            0.0
        } else {
            x.data()[(c * h + y as usize) * wd + xx as usize]
        }
    };
    Tensor::from_fn(&[co, ho, wo], |idx| {
        let (o, rest) = (idx / (ho * wo), idx % (ho * wo));
        let (oy, ox) = (rest / wo, rest % wo);
        let mut s = 0.0;
        for c in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    let y = (oy * stride + ky) as isize - pad as isize;
                    let xx = (ox * stride + kx) as isize - pad as isize;
                    s += w.data()[((o * ci + c) * k + ky) * k + kx] * at(c, y, xx);
                }
            }
        }
        s
    })
}

#[test]
fn conv_matches_direct_summation() {
    let x = randn(&[4, 7, 7], 1);
    let w = randn(&[2, 4, 3, 3], 2);
    for (stride, pad) in [(1, 1), (1, 0), (2, 1), (2, 0)] {
        let got = ops::conv2d(&x, &w, stride, pad).unwrap();
        let want = conv_oracle(&x, &w, stride, pad);
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12, "stride {stride} pad {pad}");
    }
    let w1 = randn(&[3, 4, 1, 1], 3);
    let got = ops::conv2d(&x, &w1, 1, 0).unwrap();
    assert!(ops::conv2d(&randn(&[4, 6, 6], 3), &w, 2, 1).is_err());
    assert!(got.max_abs_diff(&conv_oracle(&x, &w1, 1, 0)).unwrap() < 1e-12);
}

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn check(name: &str, err: f64) {
    assert!(err < TOL, "{name}: gradcheck error {err:e}");
}

#[test]
fn gradcheck_sum_of_squares_is_exact() {
    let x = randn(&[5], 4);
    let err = gradcheck(|g, v| { let s = g.mul(v, v)?; Ok(g.sum(s)) }, &x, EPS).unwrap();
    assert!(err < 1e-8, "{err:e}");
}

#[test]
fn gradcheck_detects_corrupted_gradient() {
    let x = randn(&[5], 5);
    let analytic: Vec<f64> = x.data().iter().map(|v| 2.0 * v * 1.01).collect();
    let err = compare_gradients(&analytic, |g, v| { let s = g.mul(v, v)?; Ok(g.sum(s)) }, &x, EPS).unwrap();
    assert!(err > 1e-3, "{err:e}");
}

#[test]
fn gradcheck_elementwise_ops() {
    let x = randn_away(&[2, 3, 3], 6);
    let other = randn(&[2, 3, 3], 7);
    let proj = randn(&[2, 3, 3], 8);
    // project onto a random direction so every coordinate has a distinct gradient
    let dotp = |g: &mut Graph, y| -> uet_core::Result<_> {
        let p = g.constant(proj.clone());
        let m = g.mul(y, p)?;
        Ok(g.sum(m))
    };
    check("add", gradcheck(|g, v| { let o = g.constant(other.clone()); let y = g.add(v, o)?; dotp(g, y) }, &x, EPS).unwrap());
    check("sub", gradcheck(|g, v| { let o = g.constant(other.clone()); let y = g.sub(o, v)?; dotp(g, y) }, &x, EPS).unwrap());
    check("mul", gradcheck(|g, v| { let o = g.constant(other.clone()); let y = g.mul(v, o)?; dotp(g, y) }, &x, EPS).unwrap());
    check("scale", gradcheck(|g, v| { let y = g.scale(v, -1.7); dotp(g, y) }, &x, EPS).unwrap());
    check("relu", gradcheck(|g, v| { let y = g.relu(v); dotp(g, y) }, &x, EPS).unwrap());
    check("mean", gradcheck(|g, v| { let y = g.mul(v, v)?; Ok(g.mean(y)) }, &x, EPS).unwrap());
    let s = Tensor::scalar(0.7);
    check("scalar-broadcast", gradcheck(|g, v| { let xs = g.constant(x.clone()); let y = g.mul(xs, v)?; dotp(g, y) }, &s, EPS).unwrap());
}

#[test]
fn gradcheck_conv_pool_upsample_bias() {
    let x = randn(&[3, 6, 6], 9);
    let w = randn(&[2, 3, 3, 3], 10);
    let proj = randn(&[2, 6, 6], 11);
    let x7 = randn(&[3, 7, 7], 21);
    let proj_small = randn(&[2, 4, 4], 12);
    let proj_big = randn(&[3, 12, 12], 13);
    check("conv2d/x", gradcheck(|g, v| {
        let wv = g.constant(w.clone());
        let y = g.conv2d(v, wv, 1, 1)?;
        let p = g.constant(proj.clone());
        let m = g.mul(y, p)?;
        Ok(g.sum(m))
    }, &x, EPS).unwrap());
    check("conv2d/w", gradcheck(|g, v| {
        let xv = g.constant(x7.clone());
        let y = g.conv2d(xv, v, 2, 1)?;
        let p = g.constant(proj_small.clone());
        let m = g.mul(y, p)?;
        Ok(g.sum(m))
    }, &w, EPS).unwrap());
    let b = randn(&[3], 14);
    check("bias", gradcheck(|g, v| {
        let xv = g.constant(x.clone());
        let y = g.add_channel_bias(xv, v)?;
        let sq = g.mul(y, y)?;
        Ok(g.mean(sq))
    }, &b, EPS).unwrap());
    check("pool2x", gradcheck(|g, v| {
        let y = g.pool2x(v)?;
        let sq = g.mul(y, y)?;
        Ok(g.sum(sq))
    }, &x, EPS).unwrap());
    check("upsample2x", gradcheck(|g, v| {
        let y = g.upsample2x(v)?;
        let p = g.constant(proj_big.clone());
        let m = g.mul(y, p)?;
        Ok(g.sum(m))
    }, &x, EPS).unwrap());
}

#[test]
fn gradcheck_losses_and_fused_ops() {
    let a = randn_away(&[3, 4, 4], 15);
    let b = randn_away(&[3, 4, 4], 16);
    let labels: Vec<usize> = (0..16).map(|i| i % 3).collect();
    check("mse", gradcheck(|g, v| { let o = g.constant(b.clone()); g.mse(v, o) }, &a, EPS).unwrap());
    check("cross_entropy", gradcheck(|g, v| g.cross_entropy(v, &labels), &a, EPS).unwrap());
    check("kl/pred", gradcheck(|g, v| { let o = g.constant(b.clone()); g.kl_div(o, v, 2.0) }, &a, EPS).unwrap());
    check("kl/target", gradcheck(|g, v| { let o = g.constant(b.clone()); g.kl_div(v, o, 2.0) }, &a, EPS).unwrap());
    let proj = randn(&[3, 4, 4], 17);
    let dotp = |g: &mut Graph, y| -> uet_core::Result<_> {
        let p = g.constant(proj.clone());
        let m = g.mul(y, p)?;
        Ok(g.sum(m))
    };
    check("standardize", gradcheck(|g, v| { let y = g.standardize_channels(v, 1e-6)?; dotp(g, y) }, &a, EPS).unwrap());
    check("attention", gradcheck(|g, v| { let y = g.attention(v, 2.0)?; dotp(g, y) }, &a, EPS).unwrap());
    check("pearson/a", gradcheck(|g, v| { let o = g.constant(b.clone()); Ok(g.pearson_distance(v, o)?.0) }, &a, EPS).unwrap());
    check("pearson/b", gradcheck(|g, v| { let o = g.constant(a.clone()); Ok(g.pearson_distance(o, v)?.0) }, &b, EPS).unwrap());
    check("ssim/a", gradcheck(|g, v| { let o = g.constant(b.clone()); g.ssim_distance(v, o) }, &a, EPS).unwrap());
    check("ssim/b", gradcheck(|g, v| { let o = g.constant(a.clone()); g.ssim_distance(o, v) }, &b, EPS).unwrap());
}

#[test]
fn backward_populates_only_tracked_leaves() {
    let mut g = Graph::new();
    let teacher = g.input(&randn(&[2, 2, 2], 18));
    let w = g.input(&randn(&[2, 2, 1, 1], 19).with_requires_grad(true));
    let x = g.input(&randn(&[2, 2, 2], 20));
    let y = g.conv2d(x, w, 1, 0).unwrap();
    let loss = g.mse(y, teacher).unwrap();
    g.backward(loss).unwrap();
    assert!(g.grad(teacher).is_none());
    assert!(g.grad(x).is_none());
    assert!(g.grad(w).unwrap().iter().all(|v| v.is_finite()));
}

fn tiny_net<E: Exec>(e: &mut E, x: &Tensor, w: &Tensor, b: &Tensor) -> uet_core::Result<E::Val> {
    let xv = e.input(x);
    let wv = e.input(w);
    let bv = e.input(b);
    let y = e.conv2d(&xv, &wv, 1, 1)?;
    let y = e.add_channel_bias(&y, &bv)?;
    let y = e.relu(&y);
    let p = e.pool2x(&y)?;
    let u = e.upsample2x(&p)?;
    let z = e.attention(&u, 2.0)?;
    e.standardize_channels(&z, 1e-6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn eager_and_tracked_forward_agree_bitwise(seed in 0u64..10_000) {
        let x = randn(&[2, 4, 4], seed);
        let w = randn(&[3, 2, 3, 3], seed + 1).with_requires_grad(true);
        let b = randn(&[3], seed + 2).with_requires_grad(true);
        let eager = tiny_net(&mut Eager, &x, &w, &b).unwrap();
        let mut g = Graph::new();
        let tracked = tiny_net(&mut g, &x, &w, &b).unwrap();
        prop_assert!(eager.bit_eq(g.value(tracked)));
    }

    #[test]
    fn pool_inverts_upsample(seed in 0u64..10_000, c in 1usize..4, h in 1usize..6, w in 1usize..6) {
        let x = randn(&[c, h, w], seed);
        let back = ops::pool2x(&ops::upsample2x(&x).unwrap()).unwrap();
        prop_assert!(back.bit_eq(&x));
    }

    #[test]
    fn repeated_backward_doubles_grads(seed in 0u64..10_000) {
        let x = randn(&[2, 4, 4], seed);
        let mut g = Graph::new();
        let w = g.input(&randn(&[3, 2, 3, 3], seed + 1).with_requires_grad(true));
        let xv = g.input(&x);
        let y = g.conv2d(xv, w, 1, 1).unwrap();
        let y = g.attention(y, 2.0).unwrap();
        let sq = g.mul(y, y).unwrap();
        let loss = g.mean(sq);
        g.backward(loss).unwrap();
        let once = g.grad(w).unwrap().to_vec();
        g.backward(loss).unwrap();
        for (a, b) in once.iter().zip(g.grad(w).unwrap()) {
            prop_assert_eq!(2.0 * a, *b);
        }
    }
}
