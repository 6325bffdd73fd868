use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeom};
use super::ops::{self, BinaryOp};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(BinaryOp, Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    ChannelBias(Var, Var),
    Pool2x(Var),
    Upsample2x(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    CrossEntropy(Var, Vec<usize>),
    Kl { target: Var, pred: Var, temperature: f64 },
    Standardize(Var, f64),
    Attention(Var, f64),
    Pearson(Var, Var),
    Ssim(Var, Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    /// `None` for values that do not depend on any tracked leaf.
    op: Option<Op>,
}

/// Append-only tape for reverse-mode differentiation.
///
/// Nodes are stored in creation order, so every node's inputs precede it and
/// `backward` is a single reverse sweep. Only results that depend on a tracked
/// leaf carry an op record; everything else is a plain constant.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes carrying an op record (tracked leaves included).
    pub fn tracked_len(&self) -> usize {
        self.nodes.iter().filter(|n| n.op.is_some()).count()
    }

    fn push(&mut self, value: Tensor, op: Option<Op>) -> Var {
        let mut value = value;
        value.set_requires_grad(op.is_some());
        self.nodes.push(Node { value, op });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf; tracked iff `tracked` is set.
    pub fn leaf(&mut self, value: Tensor, tracked: bool) -> Var {
        self.push(value, tracked.then_some(Op::Leaf))
    }

    pub fn input(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone(), t.requires_grad())
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].op.is_some()
    }

    /// Accumulated gradient of a tracked leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn record(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let tracked = inputs.iter().any(|&v| self.is_tracked(v));
        self.push(value, tracked.then_some(op))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let out = ops::binary(op, self.value(a), self.value(b))?;
        Ok(self.record(out, &[a, b], Op::Binary(op, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = ops::scale(self.value(a), c);
        self.record(out, &[a], Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = ops::relu(self.value(a));
        self.record(out, &[a], Op::Relu(a))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ops::conv_geom(self.value(x), self.value(w), stride, pad)?;
        let out = ops::conv2d(self.value(x), self.value(w), stride, pad)?;
        Ok(self.record(out, &[x, w], Op::Conv2d { x, w, geom }))
    }

    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let out = ops::add_channel_bias(self.value(x), self.value(b))?;
        Ok(self.record(out, &[x, b], Op::ChannelBias(x, b)))
    }

    pub fn pool2x(&mut self, x: Var) -> Result<Var> {
        let out = ops::pool2x(self.value(x))?;
        Ok(self.record(out, &[x], Op::Pool2x(x)))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let out = ops::upsample2x(self.value(x))?;
        Ok(self.record(out, &[x], Op::Upsample2x(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = ops::sum(self.value(x));
        self.record(out, &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = ops::mean(self.value(x));
        self.record(out, &[x], Op::Mean(x))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mse(self.value(a), self.value(b))?;
        Ok(self.record(out, &[a, b], Op::Mse(a, b)))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let out = ops::cross_entropy(self.value(logits), labels)?;
        Ok(self.record(out, &[logits], Op::CrossEntropy(logits, labels.to_vec())))
    }

    pub fn kl_div(&mut self, target: Var, pred: Var, temperature: f64) -> Result<Var> {
        let out = ops::kl_div(self.value(target), self.value(pred), temperature)?;
        Ok(self.record(
            out,
            &[target, pred],
            Op::Kl {
                target,
                pred,
                temperature,
            },
        ))
    }

    pub fn standardize_channels(&mut self, x: Var, eps: f64) -> Result<Var> {
        let out = ops::standardize_channels(self.value(x), eps)?;
        Ok(self.record(out, &[x], Op::Standardize(x, eps)))
    }

    pub fn attention(&mut self, x: Var, tau: f64) -> Result<Var> {
        let out = ops::attention(self.value(x), tau)?;
        Ok(self.record(out, &[x], Op::Attention(x, tau)))
    }

    pub fn pearson_distance(&mut self, a: Var, b: Var) -> Result<(Var, usize)> {
        let (out, degenerate) = ops::pearson_distance(self.value(a), self.value(b))?;
        Ok((self.record(out, &[a, b], Op::Pearson(a, b)), degenerate))
    }

    pub fn ssim_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::ssim_distance(self.value(a), self.value(b))?;
        Ok(self.record(out, &[a, b], Op::Ssim(a, b)))
    }

    /// Back-propagates from a scalar `loss`, adding (`+=`) into the gradients
    /// of every tracked leaf. Untracked values never receive a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::NotScalar {
                shape: root.value.shape().to_vec(),
            });
        }
        if root.op.is_none() {
            return Ok(());
        }
        let mut tmp: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        tmp[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = tmp[i].take() else { continue };
            let Some(op) = &self.nodes[i].op else { continue };
            for (v, gv) in self.input_grads(op, &g) {
                if !self.is_tracked(v) {
                    continue;
                }
                match &mut tmp[v.0] {
                    Some(acc) => acc.iter_mut().zip(&gv).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(gv),
                }
            }
            if matches!(op, Op::Leaf) {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, op: &Op, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: Var| self.value(v);
        match op {
            Op::Leaf => Vec::new(),
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (ga, gb) = binary_grads(*kind, ta.data(), tb.data(), g);
                vec![(*a, reduce_to(ga, ta.numel())), (*b, reduce_to(gb, tb.numel()))]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|v| v * c).collect())],
            Op::Relu(a) => vec![(
                *a,
                val(*a)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
                    .collect(),
            )],
            Op::Conv2d { x, w, geom } => {
                let (gx, gw) = kernels::conv2d_backward(g, val(*x).data(), val(*w).data(), geom);
                vec![(*x, gx), (*w, gw)]
            }
            Op::ChannelBias(x, b) => {
                let c = val(*b).numel();
                vec![(*x, g.to_vec()), (*b, kernels::channel_sum(g, c))]
            }
            Op::Pool2x(x) => {
                let s = val(*x).shape();
                vec![(*x, kernels::pool2x_backward(g, s[0], s[1], s[2]))]
            }
            Op::Upsample2x(x) => {
                let s = val(*x).shape();
                vec![(*x, kernels::upsample2x_backward(g, s[0], s[1], s[2]))]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).numel()])],
            Op::Mean(x) => {
                let n = val(*x).numel();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                let k = 2.0 * g[0] / ta.len() as f64;
                let ga: Vec<f64> = ta.iter().zip(tb).map(|(x, y)| k * (x - y)).collect();
                let gb = ga.iter().map(|v| -v).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::CrossEntropy(logits, labels) => {
                let t = val(*logits);
                let c = t.shape()[0];
                vec![(*logits, kernels::cross_entropy_backward(g[0], t.data(), labels, c))]
            }
            Op::Kl {
                target,
                pred,
                temperature,
            } => {
                let t = val(*target);
                let (gt, gp) =
                    kernels::kl_backward(g[0], t.data(), val(*pred).data(), t.shape()[0], *temperature);
                vec![(*target, gt), (*pred, gp)]
            }
            Op::Standardize(x, eps) => {
                let t = val(*x);
                vec![(*x, kernels::standardize_backward(g, t.data(), t.shape()[0], *eps))]
            }
            Op::Attention(x, tau) => {
                let t = val(*x);
                vec![(*x, kernels::attention_backward(g, t.data(), t.shape()[0], *tau))]
            }
            Op::Pearson(a, b) => {
                let t = val(*a);
                let (ga, gb) = kernels::pearson_backward(g[0], t.data(), val(*b).data(), t.shape()[0]);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Ssim(a, b) => {
                let t = val(*a);
                let (ga, gb) = kernels::ssim_backward(g[0], t.data(), val(*b).data(), t.shape()[0]);
                vec![(*a, ga), (*b, gb)]
            }
        }
    }
}

/// Gradients of an elementwise op, still at the broadcast (output) length.
fn binary_grads(kind: BinaryOp, a: &[f64], b: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let at = |s: &[f64], i: usize| if s.len() == 1 { s[0] } else { s[i] };
    match kind {
        BinaryOp::Add => (g.to_vec(), g.to_vec()),
        BinaryOp::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
        BinaryOp::Mul => (
            g.iter().enumerate().map(|(i, gv)| gv * at(b, i)).collect(),
            g.iter().enumerate().map(|(i, gv)| gv * at(a, i)).collect(),
        ),
    }
}

fn reduce_to(g: Vec<f64>, n: usize) -> Vec<f64> {
    if g.len() == n {
        g
    } else {
        vec![g.iter().sum()]
    }
}
