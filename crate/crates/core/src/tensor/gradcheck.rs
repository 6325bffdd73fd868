use alloc::vec;

use super::graph::{Graph, Var};
use super::Tensor;
use crate::error::Result;

/// Largest relative disagreement between reverse-mode and central-difference
/// gradients of the scalar function `f` at `x`.
///
/// Per coordinate the error is `|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)`.
pub fn gradcheck<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = g
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    compare_gradients(&analytic, f, x, eps)
}

/// Compares a supplied gradient against central differences of `f`.
pub fn compare_gradients<F>(analytic: &[f64], f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |probe: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(probe);
        let out = f(&mut g, v)?;
        g.value(out).item()
    };
    let mut worst = 0.0f64;
    for (i, &g_ad) in analytic.iter().enumerate().take(x.numel()) {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let g_fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let denom = libm::fabs(g_ad).max(libm::fabs(g_fd)).max(1e-8);
        worst = worst.max(libm::fabs(g_ad - g_fd) / denom);
    }
    Ok(worst)
}
