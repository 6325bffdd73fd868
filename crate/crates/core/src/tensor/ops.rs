//! Eager, shape-checked tensor operations.
//!
//! These are the forward definitions used by both executors; the graph adds
//! op records on top of them.

use alloc::vec::Vec;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{invalid_arg, invalid_shape, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        }
    }

    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        }
    }
}

/// Elementwise binary op. Shapes must match, except that either side may be a
/// single-element tensor, which is broadcast.
pub fn binary(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out = if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| op.apply(x, y))
            .collect();
        Tensor::from_parts(a.shape().to_vec(), data)
    } else if b.is_scalar() {
        let y = b.data()[0];
        let data = a.data().iter().map(|&x| op.apply(x, y)).collect();
        Tensor::from_parts(a.shape().to_vec(), data)
    } else if a.is_scalar() {
        let x = a.data()[0];
        let data = b.data().iter().map(|&y| op.apply(x, y)).collect();
        Tensor::from_parts(b.shape().to_vec(), data)
    } else {
        return Err(Error::ShapeMismatch {
            op: op.name(),
            expected: a.shape().to_vec(),
            found: b.shape().to_vec(),
        });
    };
    Ok(out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(BinaryOp::Add, a, b)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(BinaryOp::Sub, a, b)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(BinaryOp::Mul, a, b)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|x| x * c).collect())
}

pub fn relu(a: &Tensor) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
    )
}

pub fn sum(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data().iter().sum())
}

pub fn mean(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64)
}

fn chw(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(invalid_shape(op, "expected a [C, H, W] tensor")),
    }
}

/// Validates a convolution and returns its geometry.
pub fn conv_geom(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    let (c_in, h, wd) = chw("conv2d", x)?;
    let [c_out, wc_in, k, k2] = *w.shape() else {
        return Err(invalid_shape("conv2d", "weight must be [C_out, C_in, k, k]"));
    };
    if wc_in != c_in {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            expected: [c_out, c_in, k, k2].to_vec(),
            found: w.shape().to_vec(),
        });
    }
    if k != k2 || !(k == 1 || k == 3) {
        return Err(invalid_shape("conv2d", "kernel must be 1x1 or 3x3"));
    }
    if stride == 0 {
        return Err(invalid_arg("conv2d", "stride must be positive"));
    }
    let (Some(h_out), Some(w_out)) = (
        ConvGeom::out_extent(h, k, stride, pad),
        ConvGeom::out_extent(wd, k, stride, pad),
    ) else {
        return Err(invalid_shape("conv2d", "output size is not integral"));
    };
    Ok(ConvGeom {
        c_in,
        h,
        w: wd,
        c_out,
        k,
        stride,
        pad,
        h_out,
        w_out,
    })
}

pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = conv_geom(x, w, stride, pad)?;
    let out = kernels::conv2d_forward(x.data(), w.data(), &g);
    Ok(Tensor::from_parts([g.c_out, g.h_out, g.w_out].to_vec(), out))
}

pub fn add_channel_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (c, _, _) = chw("channel_bias", x)?;
    if b.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "channel_bias",
            expected: [c].to_vec(),
            found: b.shape().to_vec(),
        });
    }
    Ok(Tensor::from_parts(
        x.shape().to_vec(),
        kernels::channel_bias_forward(x.data(), b.data()),
    ))
}

pub fn pool2x(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw("pool2x", x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(invalid_shape("pool2x", "spatial dimensions must be even"));
    }
    Ok(Tensor::from_parts(
        [c, h / 2, w / 2].to_vec(),
        kernels::pool2x_forward(x.data(), c, h, w),
    ))
}

pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw("upsample2x", x)?;
    Ok(Tensor::from_parts(
        [c, 2 * h, 2 * w].to_vec(),
        kernels::upsample2x_forward(x.data(), c, h, w),
    ))
}

fn require_finite(op: &'static str, ts: &[&Tensor]) -> Result<()> {
    if ts.iter().all(|t| t.all_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            expected: a.shape().to_vec(),
            found: b.shape().to_vec(),
        })
    }
}

/// Number of channels (leading axis) of a `[C, ...]` tensor of rank >= 2.
pub(crate) fn channels(op: &'static str, x: &Tensor) -> Result<usize> {
    if x.rank() < 2 {
        return Err(invalid_shape(op, "expected a [C, ...] tensor of rank >= 2"));
    }
    Ok(x.shape()[0])
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mse", a, b)?;
    require_finite("mse", &[a, b])?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(Tensor::scalar(s / a.numel() as f64))
}

/// Validates a class-index map against `[C, ...]` logits.
pub(crate) fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<usize> {
    let c = channels("cross_entropy", logits)?;
    let positions = logits.numel() / c;
    if labels.len() != positions {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            expected: logits.shape()[1..].to_vec(),
            found: [labels.len()].to_vec(),
        });
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= c) {
        return Err(invalid_arg(
            "cross_entropy",
            alloc::format!("label {bad} out of range for {c} classes"),
        ));
    }
    Ok(c)
}

/// Softmax cross-entropy along the channel axis, averaged over positions.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let c = check_labels(logits, labels)?;
    require_finite("cross_entropy", &[logits])?;
    Ok(Tensor::scalar(kernels::cross_entropy_forward(
        logits.data(),
        labels,
        c,
    )))
}

/// `KL(softmax(target / T) || softmax(pred / T))` along channels, averaged over positions.
pub fn kl_div(target: &Tensor, pred: &Tensor, temperature: f64) -> Result<Tensor> {
    same_shape("kl_div", target, pred)?;
    let c = channels("kl_div", target)?;
    require_finite("kl_div", &[target, pred])?;
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(invalid_arg("kl_div", "temperature must be positive"));
    }
    Ok(Tensor::scalar(kernels::kl_forward(
        target.data(),
        pred.data(),
        c,
        temperature,
    )))
}

pub fn standardize_channels(x: &Tensor, eps: f64) -> Result<Tensor> {
    let c = channels("standardize", x)?;
    require_finite("standardize", &[x])?;
    Ok(Tensor::from_parts(
        x.shape().to_vec(),
        kernels::standardize_forward(x.data(), c, eps),
    ))
}

pub fn attention(x: &Tensor, tau: f64) -> Result<Tensor> {
    let c = channels("attention", x)?;
    require_finite("attention", &[x])?;
    Ok(Tensor::from_parts(
        x.shape().to_vec(),
        kernels::attention_forward(x.data(), c, tau),
    ))
}

/// Pearson distance and the count of degenerate channels.
pub fn pearson_distance(a: &Tensor, b: &Tensor) -> Result<(Tensor, usize)> {
    same_shape("pearson", a, b)?;
    let c = channels("pearson", a)?;
    require_finite("pearson", &[a, b])?;
    let (d, degenerate) = kernels::pearson_forward(a.data(), b.data(), c);
    Ok((Tensor::scalar(d), degenerate))
}

pub fn ssim_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("ssim", a, b)?;
    let c = channels("ssim", a)?;
    require_finite("ssim", &[a, b])?;
    Ok(Tensor::scalar(kernels::ssim_forward(a.data(), b.data(), c)))
}

/// Per-position argmax along channels; ties resolve to the lowest index.
pub fn argmax_channels(logits: &Tensor) -> Result<Vec<usize>> {
    let c = channels("argmax", logits)?;
    let p = logits.numel() / c;
    let d = logits.data();
    Ok((0..p)
        .map(|pos| {
            let mut best = 0;
            for k in 1..c {
                if d[k * p + pos] > d[best * p + pos] {
                    best = k;
                }
            }
            best
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        assert_eq!(add(&t(&[2], &[1., 2.]), &t(&[2], &[3., 4.])).unwrap().data(), &[4., 6.]);
        assert_eq!(relu(&t(&[3], &[-1., 0., 2.])).data(), &[0., 0., 2.]);
        assert_eq!(scale(&t(&[2], &[1., 2.]), 0.5).data(), &[0.5, 1.0]);
        assert_eq!(mul(&t(&[2], &[1., 2.]), &Tensor::scalar(3.0)).unwrap().data(), &[3., 6.]);
        let err = add(&t(&[2], &[1., 2.]), &t(&[3], &[1., 2., 3.])).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { op: "add", .. }));
    }

    #[test]
    fn conv_identity_and_counting() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| i as f64 * 0.5 - 3.0);
        let mut w = Tensor::zeros(&[2, 2, 1, 1]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        assert!(conv2d(&x, &w, 1, 0).unwrap().bit_eq(&x));

        let ones = Tensor::full(&[1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&ones, &k, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn conv_rejects_bad_geometry() {
        let x = Tensor::zeros(&[1, 4, 4]);
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(conv2d(&x, &w, 2, 0).is_err()); // (4 - 3) / 2 not integral
        assert!(conv2d(&x, &w, 1, 1).is_ok());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 1, 2, 2]), 1, 0).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), 1, 1).is_err());
    }

    #[test]
    fn pool_and_upsample() {
        assert_eq!(pool2x(&Tensor::full(&[1, 2, 2], 1.0)).unwrap().data(), &[1.0]);
        assert_eq!(upsample2x(&Tensor::full(&[1, 1, 1], 2.0)).unwrap().data(), &[2.0; 4]);
        assert!(pool2x(&Tensor::zeros(&[1, 3, 2])).is_err());
    }

    #[test]
    fn loss_examples() {
        let a = t(&[2], &[1., 2.]);
        assert_eq!(mse(&a, &a).unwrap().item().unwrap(), 0.0);
        let z = Tensor::from_fn(&[4, 2, 2], |i| (i as f64).sin());
        assert_eq!(kl_div(&z, &z, 1.0).unwrap().item().unwrap(), 0.0);
        let uniform = Tensor::zeros(&[4, 2, 2]);
        for label in 0..4 {
            let ce = cross_entropy(&uniform, &[label; 4]).unwrap().item().unwrap();
            assert!((ce - 4f64.ln()).abs() < 1e-15);
        }
        let bad = t(&[2], &[f64::NAN, 0.0]);
        assert!(matches!(mse(&bad, &a), Err(Error::NonFinite { .. })));
        assert!(cross_entropy(&uniform, &[4; 4]).is_err());
        assert!(cross_entropy(&uniform, &[0; 3]).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        let z = Tensor::zeros(&[3, 1, 2]);
        assert_eq!(argmax_channels(&z).unwrap(), vec![0, 0]);
        let z = t(&[3, 1, 2], &[0., 1., 2., 1., 2., 0.]);
        assert_eq!(argmax_channels(&z).unwrap(), vec![1, 0]);
    }
}
