//! Finite-difference checks of every differentiable op and of the full
//! uncertainty-aware distillation loss.

use uet_core::distill::{kd_loss_uet, DistillConfig, Distance, Extraction, KnowledgeSource};
use uet_core::tensor::gradcheck;
use uet_core::{Graph, Pyramid, Rng, Tensor, Var};

use crate::error::Result;

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub max_rel_error: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut r = Rng::new(seed);
    Tensor::from_fn(shape, |_| r.normal())
}

/// Normal samples kept away from zero so relu kinks are not straddled.
fn randn_away(shape: &[usize], seed: u64) -> Tensor {
    let mut r = Rng::new(seed);
    Tensor::from_fn(shape, |_| {
        let v = r.normal();
        v + 0.2 * v.signum()
    })
}

fn dot(g: &mut Graph, y: Var, p: &Tensor) -> uet_core::Result<Var> {
    let p = g.constant(p.clone());
    let m = g.mul(y, p)?;
    Ok(g.sum(m))
}

/// x is the finest student level; the coarse level is its pooled copy.
fn uet_path(g: &mut Graph, x: Var, d: Distance, source: KnowledgeSource) -> uet_core::Result<Var> {
    let w0 = g.constant(randn(&[3, 2, 1, 1], 40));
    let w1 = g.constant(randn(&[3, 2, 1, 1], 41));
    let coarse = g.pool2x(x)?;
    let a0 = g.conv2d(x, w0, 1, 0)?;
    let a1 = g.conv2d(coarse, w1, 1, 0)?;
    let t = Pyramid(vec![g.constant(randn(&[3, 4, 4], 42)), g.constant(randn(&[3, 2, 2], 43))]);
    let c = DistillConfig {
        extraction: Extraction::Attention,
        distance: d,
        source,
        ..DistillConfig::uet_default()
    };
    Ok(kd_loss_uet(g, &t, &Pyramid(vec![a0, a1]), &c, &Rng::new(44), 2)?.loss)
}

/// Runs the whole suite at `eps`.
pub fn run_suite(eps: f64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut push = |name: &str, err: uet_core::Result<f64>| -> Result<()> {
        out.push(Check {
            name: name.into(),
            max_rel_error: err?,
        });
        Ok(())
    };

    let x = randn_away(&[2, 3, 4], 1);
    let other = randn(&[2, 3, 4], 2);
    let proj = randn(&[2, 3, 4], 3);
    push("add", gradcheck(|g, v| { let o = g.constant(other.clone()); let y = g.add(v, o)?; dot(g, y, &proj) }, &x, eps))?;
    push("sub", gradcheck(|g, v| { let o = g.constant(other.clone()); let y = g.sub(o, v)?; dot(g, y, &proj) }, &x, eps))?;
    push("mul", gradcheck(|g, v| { let o = g.constant(other.clone()); let y = g.mul(v, o)?; dot(g, y, &proj) }, &x, eps))?;
    push("scale", gradcheck(|g, v| { let y = g.scale(v, -1.7); dot(g, y, &proj) }, &x, eps))?;
    push("relu", gradcheck(|g, v| { let y = g.relu(v); dot(g, y, &proj) }, &x, eps))?;
    push("sum", gradcheck(|g, v| { let y = g.mul(v, v)?; Ok(g.sum(y)) }, &x, eps))?;
    push("mean", gradcheck(|g, v| { let y = g.mul(v, v)?; Ok(g.mean(y)) }, &x, eps))?;

    let img = randn(&[3, 6, 6], 9);
    let w = randn(&[2, 3, 3, 3], 10);
    let img7 = randn(&[3, 7, 7], 21);
    let bias = randn(&[3], 14);
    push("conv2d/input", gradcheck(|g, v| { let wv = g.constant(w.clone()); let y = g.conv2d(v, wv, 1, 1)?; dot(g, y, &randn(&[2, 6, 6], 11)) }, &img, eps))?;
    push("conv2d/weight", gradcheck(|g, v| { let xv = g.constant(img7.clone()); let y = g.conv2d(xv, v, 2, 1)?; dot(g, y, &randn(&[2, 4, 4], 12)) }, &w, eps))?;
    push("add_channel_bias", gradcheck(|g, v| { let xv = g.constant(img.clone()); let y = g.add_channel_bias(xv, v)?; let s = g.mul(y, y)?; Ok(g.mean(s)) }, &bias, eps))?;
    push("pool2x", gradcheck(|g, v| { let y = g.pool2x(v)?; let s = g.mul(y, y)?; Ok(g.sum(s)) }, &img, eps))?;
    push("upsample2x", gradcheck(|g, v| { let y = g.upsample2x(v)?; dot(g, y, &randn(&[3, 12, 12], 13)) }, &img, eps))?;

    let a = randn_away(&[3, 4, 4], 15);
    let b = randn_away(&[3, 4, 4], 16);
    let labels: Vec<usize> = (0..16).map(|i| i % 3).collect();
    let p = randn(&[3, 4, 4], 17);
    push("mse", gradcheck(|g, v| { let o = g.constant(b.clone()); g.mse(v, o) }, &a, eps))?;
    push("cross_entropy", gradcheck(|g, v| g.cross_entropy(v, &labels), &a, eps))?;
    push("kl_div/pred", gradcheck(|g, v| { let o = g.constant(b.clone()); g.kl_div(o, v, 2.0) }, &a, eps))?;
    push("kl_div/target", gradcheck(|g, v| { let o = g.constant(b.clone()); g.kl_div(v, o, 2.0) }, &a, eps))?;
    push("standardize_channels", gradcheck(|g, v| { let y = g.standardize_channels(v, 1e-6)?; dot(g, y, &p) }, &a, eps))?;
    push("attention", gradcheck(|g, v| { let y = g.attention(v, 2.0)?; dot(g, y, &p) }, &a, eps))?;
    push("pearson_distance", gradcheck(|g, v| { let o = g.constant(b.clone()); Ok(g.pearson_distance(v, o)?.0) }, &a, eps))?;
    push("ssim_distance", gradcheck(|g, v| { let o = g.constant(b.clone()); g.ssim_distance(v, o) }, &a, eps))?;

    let student = randn(&[2, 4, 4], 45);
    for d in Distance::ALL {
        for source in [KnowledgeSource::Teacher, KnowledgeSource::Both] {
            let name = format!("uet/attention+{}/{}", d.name(), source.name());
            push(&name, gradcheck(|g, v| uet_path(g, v, d, source), &student, eps))?;
        }
    }
    Ok(out)
}
