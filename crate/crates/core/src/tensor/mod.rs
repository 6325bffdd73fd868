//! Dense f64 tensors with reverse-mode automatic differentiation.

mod exec;
mod gradcheck;
mod graph;
pub mod kernels;
pub mod ops;

pub use exec::{Eager, Exec};
pub use gradcheck::{compare_gradients, gradcheck};
pub use graph::{Graph, Var};

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Dense row-major f64 array.
///
/// `requires_grad` marks trainable leaves; `grad` accumulates (`+=`) across
/// backward passes until [`Tensor::zero_grad`] is called.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(crate::error::invalid_shape(
                "tensor",
                "dimensions must be positive",
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                expected: shape.to_vec(),
                found: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Internal constructor for kernels whose output shape is correct by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(Vec::new(), vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    /// Builder toggle for gradient tracking.
    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.set_requires_grad(on);
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::NotScalar {
                shape: self.shape.clone(),
            })
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `delta` into the gradient buffer. Ignored when the tensor is not
    /// trainable, so frozen tensors never carry a gradient.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if !self.requires_grad {
            return Ok(());
        }
        if delta.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                expected: self.shape.clone(),
                found: vec![delta.len()],
            });
        }
        let g = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        g.iter_mut().zip(delta).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                expected: shape.to_vec(),
                found: self.shape,
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| libm::fabs(a - b))
                .fold(0.0, f64::max),
        )
    }

    /// Bitwise equality of shape and values (distinguishes `0.0` from `-0.0`).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_invariant() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(&[2, 3], vec![0.0; 5]),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
        assert_eq!(Tensor::scalar(2.0).numel(), 1);
    }

    #[test]
    fn frozen_tensor_never_gets_grad() {
        let mut t = Tensor::zeros(&[2]);
        t.accumulate_grad(&[1.0, 1.0]).unwrap();
        assert!(t.grad().is_none());
        let mut p = Tensor::zeros(&[2]).with_requires_grad(true);
        p.accumulate_grad(&[1.0, 2.0]).unwrap();
        p.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(p.grad().unwrap(), &[2.0, 4.0]);
        p.zero_grad();
        assert_eq!(p.grad().unwrap(), &[0.0, 0.0]);
    }
}
