use super::graph::{Graph, Var};
use super::ops::{self, BinaryOp};
use super::Tensor;
use crate::error::Result;

/// Forward-pass executor.
///
/// Models and losses are written once against this trait and run either
/// eagerly on plain tensors ([`Eager`], no graph at all) or on a [`Graph`]
/// that records ops for back-propagation. Both call the same kernels.
pub trait Exec {
    type Val: Clone;

    /// Brings a tensor in; tracked iff `t.requires_grad()` (graph only).
    fn input(&mut self, t: &Tensor) -> Self::Val;
    fn constant(&mut self, t: Tensor) -> Self::Val;
    fn value<'a>(&'a self, v: &'a Self::Val) -> &'a Tensor;
    /// True when gradients can flow back from `v` (always false eagerly).
    fn is_tracked(&self, v: &Self::Val) -> bool;

    fn binary(&mut self, op: BinaryOp, a: &Self::Val, b: &Self::Val) -> Result<Self::Val>;
    fn scale(&mut self, a: &Self::Val, c: f64) -> Self::Val;
    fn relu(&mut self, a: &Self::Val) -> Self::Val;
    fn conv2d(&mut self, x: &Self::Val, w: &Self::Val, stride: usize, pad: usize) -> Result<Self::Val>;
    fn add_channel_bias(&mut self, x: &Self::Val, b: &Self::Val) -> Result<Self::Val>;
    fn pool2x(&mut self, x: &Self::Val) -> Result<Self::Val>;
    fn upsample2x(&mut self, x: &Self::Val) -> Result<Self::Val>;
    fn sum(&mut self, x: &Self::Val) -> Self::Val;
    fn mean(&mut self, x: &Self::Val) -> Self::Val;
    fn mse(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val>;
    fn cross_entropy(&mut self, logits: &Self::Val, labels: &[usize]) -> Result<Self::Val>;
    fn kl_div(&mut self, target: &Self::Val, pred: &Self::Val, temperature: f64) -> Result<Self::Val>;
    fn standardize_channels(&mut self, x: &Self::Val, eps: f64) -> Result<Self::Val>;
    fn attention(&mut self, x: &Self::Val, tau: f64) -> Result<Self::Val>;
    fn pearson_distance(&mut self, a: &Self::Val, b: &Self::Val) -> Result<(Self::Val, usize)>;
    fn ssim_distance(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val>;

    fn add(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val> {
        self.binary(BinaryOp::Add, a, b)
    }

    fn sub(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val> {
        self.binary(BinaryOp::Sub, a, b)
    }

    fn mul(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val> {
        self.binary(BinaryOp::Mul, a, b)
    }
}

/// Graph-free executor over owned tensors.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl Exec for Eager {
    type Val = Tensor;

    fn input(&mut self, t: &Tensor) -> Tensor {
        t.clone().with_requires_grad(false)
    }

    fn constant(&mut self, t: Tensor) -> Tensor {
        t.with_requires_grad(false)
    }

    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }

    fn is_tracked(&self, _: &Tensor) -> bool {
        false
    }

    fn binary(&mut self, op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::binary(op, a, b)
    }

    fn scale(&mut self, a: &Tensor, c: f64) -> Tensor {
        ops::scale(a, c)
    }

    fn relu(&mut self, a: &Tensor) -> Tensor {
        ops::relu(a)
    }

    fn conv2d(&mut self, x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        ops::conv2d(x, w, stride, pad)
    }

    fn add_channel_bias(&mut self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::add_channel_bias(x, b)
    }

    fn pool2x(&mut self, x: &Tensor) -> Result<Tensor> {
        ops::pool2x(x)
    }

    fn upsample2x(&mut self, x: &Tensor) -> Result<Tensor> {
        ops::upsample2x(x)
    }

    fn sum(&mut self, x: &Tensor) -> Tensor {
        ops::sum(x)
    }

    fn mean(&mut self, x: &Tensor) -> Tensor {
        ops::mean(x)
    }

    fn mse(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::mse(a, b)
    }

    fn cross_entropy(&mut self, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
        ops::cross_entropy(logits, labels)
    }

    fn kl_div(&mut self, target: &Tensor, pred: &Tensor, temperature: f64) -> Result<Tensor> {
        ops::kl_div(target, pred, temperature)
    }

    fn standardize_channels(&mut self, x: &Tensor, eps: f64) -> Result<Tensor> {
        ops::standardize_channels(x, eps)
    }

    fn attention(&mut self, x: &Tensor, tau: f64) -> Result<Tensor> {
        ops::attention(x, tau)
    }

    fn pearson_distance(&mut self, a: &Tensor, b: &Tensor) -> Result<(Tensor, usize)> {
        ops::pearson_distance(a, b)
    }

    fn ssim_distance(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::ssim_distance(a, b)
    }
}

impl Exec for Graph {
    type Val = Var;

    fn input(&mut self, t: &Tensor) -> Var {
        Graph::input(self, t)
    }

    fn constant(&mut self, t: Tensor) -> Var {
        Graph::constant(self, t)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        Graph::value(self, *v)
    }

    fn is_tracked(&self, v: &Var) -> bool {
        Graph::is_tracked(self, *v)
    }

    fn binary(&mut self, op: BinaryOp, a: &Var, b: &Var) -> Result<Var> {
        Graph::binary(self, op, *a, *b)
    }

    fn scale(&mut self, a: &Var, c: f64) -> Var {
        Graph::scale(self, *a, c)
    }

    fn relu(&mut self, a: &Var) -> Var {
        Graph::relu(self, *a)
    }

    fn conv2d(&mut self, x: &Var, w: &Var, stride: usize, pad: usize) -> Result<Var> {
        Graph::conv2d(self, *x, *w, stride, pad)
    }

    fn add_channel_bias(&mut self, x: &Var, b: &Var) -> Result<Var> {
        Graph::add_channel_bias(self, *x, *b)
    }

    fn pool2x(&mut self, x: &Var) -> Result<Var> {
        Graph::pool2x(self, *x)
    }

    fn upsample2x(&mut self, x: &Var) -> Result<Var> {
        Graph::upsample2x(self, *x)
    }

    fn sum(&mut self, x: &Var) -> Var {
        Graph::sum(self, *x)
    }

    fn mean(&mut self, x: &Var) -> Var {
        Graph::mean(self, *x)
    }

    fn mse(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Graph::mse(self, *a, *b)
    }

    fn cross_entropy(&mut self, logits: &Var, labels: &[usize]) -> Result<Var> {
        Graph::cross_entropy(self, *logits, labels)
    }

    fn kl_div(&mut self, target: &Var, pred: &Var, temperature: f64) -> Result<Var> {
        Graph::kl_div(self, *target, *pred, temperature)
    }

    fn standardize_channels(&mut self, x: &Var, eps: f64) -> Result<Var> {
        Graph::standardize_channels(self, *x, eps)
    }

    fn attention(&mut self, x: &Var, tau: f64) -> Result<Var> {
        Graph::attention(self, *x, tau)
    }

    fn pearson_distance(&mut self, a: &Var, b: &Var) -> Result<(Var, usize)> {
        Graph::pearson_distance(self, *a, *b)
    }

    fn ssim_distance(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Graph::ssim_distance(self, *a, *b)
    }
}
