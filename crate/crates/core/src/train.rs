//! Per-sample loss assembly, gradient accumulation and cell accuracy.
//!
//! Each sample gets its own graph; gradients are pulled out of the graph and
//! added into the parameter tensors, so a mini-batch is a loop of these calls
//! followed by one optimizer step.

use alloc::format;
use alloc::vec::Vec;

use crate::distill::{kd_loss_logits_from, kd_loss_uet, DistillConfig};
use crate::error::{Error, Result};
use crate::model::{Adapter, DetNet, FeaturePyramid, Parametrized, Pyramid};
use crate::rng::Rng;
use crate::tensor::{ops, Eager, Exec, Graph, Tensor, Var};

/// Mean over scales of the per-cell cross-entropy.
pub fn task_loss<E: Exec>(e: &mut E, logits: &Pyramid<E::Val>, labels: &[Vec<usize>]) -> Result<E::Val> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::InvalidArgument {
            op: "task_loss",
            reason: format!("{} logit scales, {} label scales", logits.len(), labels.len()),
        });
    }
    let mut total: Option<E::Val> = None;
    for (l, y) in logits.iter().zip(labels) {
        let ce = e.cross_entropy(l, y)?;
        total = Some(match total {
            None => ce,
            Some(t) => e.add(&t, &ce)?,
        });
    }
    let total = total.expect("non-empty pyramid");
    Ok(e.scale(&total, 1.0 / logits.len() as f64))
}

fn pull_grads<'a>(g: &Graph, handles: impl Iterator<Item = &'a Var>, params: Vec<&mut Tensor>) -> Result<()> {
    for (h, p) in handles.zip(params) {
        if let Some(grad) = g.grad(*h) {
            p.accumulate_grad(grad)?;
        }
    }
    Ok(())
}

fn finite(op: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Adds `weight * d(task)/d(params)` for one labelled image and returns the
/// unweighted task loss.
pub fn teacher_sample_grads(net: &mut DetNet, image: &Tensor, labels: &[Vec<usize>], weight: f64) -> Result<f64> {
    let mut g = Graph::new();
    let bound = net.bind(&mut g);
    let pyr = net.forward_pyramid_bound(&mut g, &bound, image)?;
    let logits = net.forward_head_bound(&mut g, &bound, &pyr)?;
    let loss = task_loss(&mut g, &logits, labels)?;
    let value = finite("task loss", g.value(loss).item()?)?;
    let scaled = g.scale(loss, weight);
    g.backward(scaled)?;
    pull_grads(&g, bound.handles(), net.params_mut())?;
    Ok(value)
}

/// What the student imitates on one image.
#[derive(Clone, Copy, Debug)]
pub struct KdTarget<'a> {
    pub teacher: &'a DetNet,
    /// The teacher's pyramid for this image, computed once and reused.
    pub features: &'a FeaturePyramid,
    pub cfg: &'a DistillConfig,
    /// Stream for this (epoch, step, sample); dropout masks derive from it.
    pub rng: &'a Rng,
    pub epoch: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub task: f64,
    pub kd: f64,
    pub degenerate: usize,
}

/// Adds `weight * d(task + kd)/d(params)` into the student (and adapter)
/// gradients. Without a target this is plain supervised training.
pub fn student_sample_grads(
    student: &mut DetNet,
    adapter: Option<&mut Adapter>,
    image: &Tensor,
    labels: &[Vec<usize>],
    target: Option<KdTarget<'_>>,
    weight: f64,
) -> Result<StepLosses> {
    let mut g = Graph::new();
    let sb = student.bind(&mut g);
    let f_s = student.forward_pyramid_bound(&mut g, &sb, image)?;
    let logits = student.forward_head_bound(&mut g, &sb, &f_s)?;
    let task = task_loss(&mut g, &logits, labels)?;
    let mut out = StepLosses {
        task: finite("task loss", g.value(task).item()?)?,
        ..StepLosses::default()
    };
    let mut adapter_handles = None;
    let total = match target {
        None => task,
        Some(t) => {
            let f_t = Pyramid(t.features.iter().map(|x| g.constant(x.clone())).collect());
            let kd = if t.cfg.logits_mode {
                kd_loss_logits_from(&mut g, t.teacher, &f_t, &logits, t.cfg, t.rng, t.epoch)?
            } else {
                let a = adapter.as_deref().ok_or_else(|| {
                    Error::InvalidConfig("feature distillation needs an adapter".into())
                })?;
                let ab = a.bind(&mut g);
                let adapted = a.adapt_bound(&mut g, &ab, &f_s)?;
                adapter_handles = Some(ab);
                kd_loss_uet(&mut g, &f_t, &adapted, t.cfg, t.rng, t.epoch)?
            };
            out.kd = finite("kd loss", g.value(kd.loss).item()?)?;
            out.degenerate = kd.degenerate;
            g.add(task, kd.loss)?
        }
    };
    let scaled = g.scale(total, weight);
    g.backward(scaled)?;
    pull_grads(&g, sb.handles(), student.params_mut())?;
    if let (Some(a), Some(ab)) = (adapter, adapter_handles) {
        pull_grads(&g, ab.iter(), a.params_mut())?;
    }
    Ok(out)
}

/// Predicted class per cell at every scale; ties go to the lowest class.
pub fn predict(net: &DetNet, image: &Tensor) -> Result<Vec<Vec<usize>>> {
    let pyr = net.forward_pyramid(&mut Eager, image)?;
    let logits = net.forward_head(&mut Eager, &pyr)?;
    logits.iter().map(ops::argmax_channels).collect()
}

/// Correct cells over total cells, per scale and macro-averaged over scales.
#[derive(Clone, Debug, PartialEq)]
pub struct Accuracy {
    pub per_scale: Vec<f64>,
    pub mean: f64,
}

pub fn evaluate<'a>(net: &DetNet, samples: impl IntoIterator<Item = (&'a Tensor, &'a [Vec<usize>])>) -> Result<Accuracy> {
    let m = net.spec.scales;
    let mut correct = alloc::vec![0usize; m];
    let mut total = alloc::vec![0usize; m];
    for (image, labels) in samples {
        let pred = predict(net, image)?;
        for s in 0..m {
            let (p, y) = (&pred[s], &labels[s]);
            if p.len() != y.len() {
                return Err(Error::ShapeMismatch {
                    op: "evaluate",
                    expected: alloc::vec![p.len()],
                    found: alloc::vec![y.len()],
                });
            }
            correct[s] += p.iter().zip(y).filter(|(a, b)| a == b).count();
            total[s] += y.len();
        }
    }
    let per_scale: Vec<f64> = correct
        .iter()
        .zip(&total)
        .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
        .collect();
    let mean = per_scale.iter().sum::<f64>() / m as f64;
    Ok(Accuracy { per_scale, mean })
}
