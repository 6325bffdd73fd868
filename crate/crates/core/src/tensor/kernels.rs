//! Slice-level forward and backward kernels.
//!
//! Every kernel here is shared by the eager executor and the graph, which is
//! what makes graph-free inference bit-identical to a tracked forward pass.

use alloc::vec;
use alloc::vec::Vec;

/// Dot product with four independent accumulators (fixed summation order).
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Geometry of a square-kernel 2-D convolution over one `[C, H, W]` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Output extent along one axis, or `None` when it is not integral.
    pub fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let span = (n + 2 * pad).checked_sub(k)?;
        (span % stride == 0).then_some(span / stride + 1)
    }

    /// Valid output index range `[lo, hi)` for kernel offset `kk` along an axis of length `n`.
    fn valid(&self, kk: usize, n: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kk as isize - self.pad as isize;
        // need 0 <= o*s + off < n
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_excl = if (n as isize) - off <= 0 {
            0
        } else {
            ((n as isize - off - 1) / s + 1).min(n_out as isize)
        };
        (lo as usize, (hi_excl.max(lo)) as usize)
    }
}

/// Visits every (output row, input row, output column range, input column start)
/// segment touched by kernel tap `(ky, kx)`.
#[inline]
fn for_each_segment(
    g: &ConvGeom,
    ky: usize,
    kx: usize,
    mut f: impl FnMut(usize, usize, usize, usize, usize),
) {
    let (oy_lo, oy_hi) = g.valid(ky, g.h, g.h_out);
    let (ox_lo, ox_hi) = g.valid(kx, g.w, g.w_out);
    if ox_lo >= ox_hi {
        return;
    }
    for oy in oy_lo..oy_hi {
        let iy = oy * g.stride + ky - g.pad;
        let ix0 = ox_lo * g.stride + kx - g.pad;
        f(oy, iy, ox_lo, ox_hi, ix0);
    }
}

/// Zero-padded copy of every channel, `(h + 2p) x (w + 2p)` each.
fn pad_planes(x: &[f64], c: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; c * hp * wp];
    for ch in 0..c {
        for y in 0..h {
            let src = &x[(ch * h + y) * w..(ch * h + y + 1) * w];
            let dst = (ch * hp + y + p) * wp + p;
            out[dst..dst + w].copy_from_slice(src);
        }
    }
    out
}

/// `acc[i] += sum_t w[t] * plane[i + off[t]]` for a 3x3 kernel, one pass over `acc`.
#[inline]
fn taps9(w: &[f64], plane: &[f64], off: &[usize], acc: &mut [f64]) {
    let n = acc.len();
    let p: [&[f64]; 9] = core::array::from_fn(|t| &plane[off[t]..off[t] + n]);
    let w: [f64; 9] = core::array::from_fn(|t| w[t]);
    for i in 0..n {
        let a = (w[0] * p[0][i] + w[1] * p[1][i]) + (w[2] * p[2][i] + w[3] * p[3][i]);
        let b = (w[4] * p[4][i] + w[5] * p[5][i]) + (w[6] * p[6][i] + w[7] * p[7][i]);
        acc[i] += (a + b) + w[8] * p[8][i];
    }
}

/// `out[t] = sum_i g[i] * plane[i + off[t]]` for all nine taps in one pass,
/// four fixed lanes per tap.
#[inline]
fn dots9(g: &[f64], plane: &[f64], off: &[usize], out: &mut [f64]) {
    let n = g.len();
    let p: [&[f64]; 9] = core::array::from_fn(|t| &plane[off[t]..off[t] + n]);
    let mut acc = [[0.0f64; 4]; 9];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = 4 * c;
        let gv: [f64; 4] = [g[i], g[i + 1], g[i + 2], g[i + 3]];
        for t in 0..9 {
            let pt = &p[t][i..i + 4];
            for l in 0..4 {
                acc[t][l] += gv[l] * pt[l];
            }
        }
    }
    for t in 0..9 {
        let mut tail = 0.0;
        for i in 4 * chunks..n {
            tail += g[i] * p[t][i];
        }
        out[t] = (acc[t][0] + acc[t][1]) + (acc[t][2] + acc[t][3]) + tail;
    }
}

/// Stride-1 convolution on padded planes: output rows are computed at the
/// padded width `wp` so every kernel tap is one long contiguous axpy; the
/// extra columns are discarded afterwards.
fn conv2d_forward_s1(x: &[f64], wt: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (hp, wp) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
    let xp = pad_planes(x, g.c_in, g.h, g.w, g.pad);
    let plane_len = hp * wp;
    let span = (g.h_out - 1) * wp + g.w_out;
    let kk = g.k * g.k;
    let offsets: Vec<usize> = (0..kk).map(|t| (t / g.k) * wp + t % g.k).collect();
    let mut wide = vec![0.0; span];
    let mut out = Vec::with_capacity(g.c_out * g.h_out * g.w_out);
    for co in 0..g.c_out {
        wide.iter_mut().for_each(|v| *v = 0.0);
        for ci in 0..g.c_in {
            let plane = &xp[ci * plane_len..(ci + 1) * plane_len];
            let taps = &wt[(co * g.c_in + ci) * kk..(co * g.c_in + ci + 1) * kk];
            if kk == 9 {
                taps9(taps, plane, &offsets, &mut wide);
            } else {
                for (&wv, &off) in taps.iter().zip(&offsets) {
                    axpy(wv, &plane[off..off + span], &mut wide);
                }
            }
        }
        for oy in 0..g.h_out {
            out.extend_from_slice(&wide[oy * wp..oy * wp + g.w_out]);
        }
    }
    out
}

fn conv2d_backward_s1(gout: &[f64], x: &[f64], wt: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let kk = g.k * g.k;
    // grad wrt input: full correlation of gout with the flipped, transposed kernel
    let mut flipped = vec![0.0; wt.len()];
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for t in 0..kk {
                flipped[(ci * g.c_out + co) * kk + (kk - 1 - t)] = wt[(co * g.c_in + ci) * kk + t];
            }
        }
    }
    let back = ConvGeom {
        c_in: g.c_out,
        h: g.h_out,
        w: g.w_out,
        c_out: g.c_in,
        k: g.k,
        stride: 1,
        pad: g.k - 1 - g.pad,
        h_out: g.h,
        w_out: g.w,
    };
    let gx = conv2d_forward_s1(gout, &flipped, &back);

    // grad wrt weights: one pass over each (co, ci) pair accumulating every tap
    let (hp, wp) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
    let xp = pad_planes(x, g.c_in, g.h, g.w, g.pad);
    let span = (g.h_out - 1) * wp + g.w_out;
    let ohw = g.h_out * g.w_out;
    let offsets: Vec<usize> = (0..kk).map(|t| (t / g.k) * wp + t % g.k).collect();
    let mut gw = vec![0.0; g.c_out * g.c_in * kk];
    let mut gwide = vec![0.0; span];
    for co in 0..g.c_out {
        let go = &gout[co * ohw..(co + 1) * ohw];
        for oy in 0..g.h_out {
            gwide[oy * wp..oy * wp + g.w_out].copy_from_slice(&go[oy * g.w_out..(oy + 1) * g.w_out]);
        }
        for ci in 0..g.c_in {
            let plane = &xp[ci * hp * wp..(ci + 1) * hp * wp];
            let wbase = (co * g.c_in + ci) * kk;
            let out = &mut gw[wbase..wbase + kk];
            if kk == 9 {
                dots9(&gwide, plane, &offsets, out);
            } else {
                for (o, &off) in out.iter_mut().zip(&offsets) {
                    *o = dot(&gwide, &plane[off..off + span]);
                }
            }
        }
    }
    (gx, gw)
}

pub fn conv2d_forward(x: &[f64], wt: &[f64], g: &ConvGeom) -> Vec<f64> {
    if g.stride == 1 {
        return conv2d_forward_s1(x, wt, g);
    }
    let (hw, ohw, kk) = (g.h * g.w, g.h_out * g.w_out, g.k * g.k);
    let mut out = vec![0.0; g.c_out * ohw];
    for co in 0..g.c_out {
        let out_c = &mut out[co * ohw..(co + 1) * ohw];
        for ci in 0..g.c_in {
            let xc = &x[ci * hw..(ci + 1) * hw];
            let wbase = (co * g.c_in + ci) * kk;
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = wt[wbase + ky * g.k + kx];
                    for_each_segment(g, ky, kx, |oy, iy, lo, hi, ix0| {
                        let row = &mut out_c[oy * g.w_out + lo..oy * g.w_out + hi];
                        if g.stride == 1 {
                            axpy(wv, &xc[iy * g.w + ix0..iy * g.w + ix0 + (hi - lo)], row);
                        } else {
                            for (j, o) in row.iter_mut().enumerate() {
                                *o += wv * xc[iy * g.w + ix0 + j * g.stride];
                            }
                        }
                    });
                }
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_w)` for upstream gradient `gout`.
pub fn conv2d_backward(gout: &[f64], x: &[f64], wt: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    if g.stride == 1 {
        return conv2d_backward_s1(gout, x, wt, g);
    }
    let (hw, ohw, kk) = (g.h * g.w, g.h_out * g.w_out, g.k * g.k);
    let mut gx = vec![0.0; g.c_in * hw];
    let mut gw = vec![0.0; g.c_out * g.c_in * kk];
    for co in 0..g.c_out {
        let go = &gout[co * ohw..(co + 1) * ohw];
        for ci in 0..g.c_in {
            let xc = &x[ci * hw..(ci + 1) * hw];
            let gxc = &mut gx[ci * hw..(ci + 1) * hw];
            let wbase = (co * g.c_in + ci) * kk;
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let widx = wbase + ky * g.k + kx;
                    let wv = wt[widx];
                    let mut acc = 0.0;
                    for_each_segment(g, ky, kx, |oy, iy, lo, hi, ix0| {
                        let grow = &go[oy * g.w_out + lo..oy * g.w_out + hi];
                        if g.stride == 1 {
                            let span = iy * g.w + ix0..iy * g.w + ix0 + (hi - lo);
                            acc += dot(grow, &xc[span.clone()]);
                            axpy(wv, grow, &mut gxc[span]);
                        } else {
                            for (j, gv) in grow.iter().enumerate() {
                                let ix = iy * g.w + ix0 + j * g.stride;
                                acc += gv * xc[ix];
                                gxc[ix] += wv * gv;
                            }
                        }
                    });
                    gw[widx] += acc;
                }
            }
        }
    }
    (gx, gw)
}

/// Adds `bias[c]` to every element of channel `c` of a `[C, ...]` buffer.
pub fn channel_bias_forward(x: &[f64], bias: &[f64]) -> Vec<f64> {
    let per = x.len() / bias.len();
    x.chunks(per)
        .zip(bias)
        .flat_map(|(row, b)| row.iter().map(move |v| v + b))
        .collect()
}

pub fn channel_sum(g: &[f64], channels: usize) -> Vec<f64> {
    let per = g.len() / channels;
    g.chunks(per).map(|row| row.iter().sum()).collect()
}

/// 2x2 mean pooling of a `[C, H, W]` buffer with even `H`, `W`.
pub fn pool2x_forward(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let xc = &x[ch * h * w..];
        for y in 0..ho {
            let r0 = &xc[2 * y * w..];
            let r1 = &xc[(2 * y + 1) * w..];
            for xx in 0..wo {
                let s = (r0[2 * xx] + r0[2 * xx + 1]) + (r1[2 * xx] + r1[2 * xx + 1]);
                out.push(s * 0.25);
            }
        }
    }
    out
}

pub fn pool2x_backward(gout: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                gx[(ch * h + y) * w + xx] = 0.25 * gout[(ch * ho + y / 2) * wo + xx / 2];
            }
        }
    }
    gx
}

/// Nearest-neighbour 2x upsampling of a `[C, H, W]` buffer.
pub fn upsample2x_forward(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for y in 0..ho {
            let row = &x[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
            for xx in 0..wo {
                out.push(row[xx / 2]);
            }
        }
    }
    out
}

pub fn upsample2x_backward(gout: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let wo = 2 * w;
    let mut gx = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            let r0 = &gout[(ch * 2 * h + 2 * y) * wo..];
            let r1 = &gout[(ch * 2 * h + 2 * y + 1) * wo..];
            for xx in 0..w {
                gx.push((r0[2 * xx] + r0[2 * xx + 1]) + (r1[2 * xx] + r1[2 * xx + 1]));
            }
        }
    }
    gx
}

fn log_softmax_into(z: &[f64], scale: f64, out: &mut [f64]) {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b * scale));
    let s: f64 = z.iter().map(|&v| libm::exp(v * scale - m)).sum();
    let lse = m + libm::log(s);
    for (o, &v) in out.iter_mut().zip(z) {
        *o = v * scale - lse;
    }
}

/// Gathers the channel vector at spatial position `p` of a `[C, P]` buffer.
#[inline]
fn gather(x: &[f64], c: usize, p: usize, positions: usize, buf: &mut [f64]) {
    for (k, slot) in buf.iter_mut().enumerate().take(c) {
        *slot = x[k * positions + p];
    }
}

/// Mean over positions of softmax cross-entropy along the channel axis.
pub fn cross_entropy_forward(logits: &[f64], labels: &[usize], c: usize) -> f64 {
    let p = labels.len();
    let (mut z, mut ls) = (vec![0.0; c], vec![0.0; c]);
    let mut total = 0.0;
    for (pos, &lab) in labels.iter().enumerate() {
        gather(logits, c, pos, p, &mut z);
        log_softmax_into(&z, 1.0, &mut ls);
        total -= ls[lab];
    }
    total / p as f64
}

pub fn cross_entropy_backward(gout: f64, logits: &[f64], labels: &[usize], c: usize) -> Vec<f64> {
    let p = labels.len();
    let mut g = vec![0.0; logits.len()];
    let (mut z, mut ls) = (vec![0.0; c], vec![0.0; c]);
    let k = gout / p as f64;
    for (pos, &lab) in labels.iter().enumerate() {
        gather(logits, c, pos, p, &mut z);
        log_softmax_into(&z, 1.0, &mut ls);
        for ch in 0..c {
            let onehot = if ch == lab { 1.0 } else { 0.0 };
            g[ch * p + pos] = k * (libm::exp(ls[ch]) - onehot);
        }
    }
    g
}

/// Mean over positions of `KL(softmax(t/T) || softmax(s/T))` along the channel axis.
pub fn kl_forward(target: &[f64], pred: &[f64], c: usize, temperature: f64) -> f64 {
    let p = target.len() / c;
    let inv_t = 1.0 / temperature;
    let (mut zt, mut zs, mut lt, mut ls) = (vec![0.0; c], vec![0.0; c], vec![0.0; c], vec![0.0; c]);
    let mut total = 0.0;
    for pos in 0..p {
        gather(target, c, pos, p, &mut zt);
        gather(pred, c, pos, p, &mut zs);
        log_softmax_into(&zt, inv_t, &mut lt);
        log_softmax_into(&zs, inv_t, &mut ls);
        let kl: f64 = (0..c).map(|k| libm::exp(lt[k]) * (lt[k] - ls[k])).sum();
        total += kl;
    }
    (total / p as f64).max(0.0)
}

/// Returns `(grad_target, grad_pred)`.
pub fn kl_backward(
    gout: f64,
    target: &[f64],
    pred: &[f64],
    c: usize,
    temperature: f64,
) -> (Vec<f64>, Vec<f64>) {
    let p = target.len() / c;
    let inv_t = 1.0 / temperature;
    let (mut zt, mut zs, mut lt, mut ls) = (vec![0.0; c], vec![0.0; c], vec![0.0; c], vec![0.0; c]);
    let mut gt = vec![0.0; target.len()];
    let mut gs = vec![0.0; pred.len()];
    let k = gout * inv_t / p as f64;
    for pos in 0..p {
        gather(target, c, pos, p, &mut zt);
        gather(pred, c, pos, p, &mut zs);
        log_softmax_into(&zt, inv_t, &mut lt);
        log_softmax_into(&zs, inv_t, &mut ls);
        let kl: f64 = (0..c).map(|j| libm::exp(lt[j]) * (lt[j] - ls[j])).sum();
        for j in 0..c {
            let pt = libm::exp(lt[j]);
            let q = libm::exp(ls[j]);
            gs[j * p + pos] = k * (q - pt);
            gt[j * p + pos] = k * pt * ((lt[j] - ls[j]) - kl);
        }
    }
    (gt, gs)
}

/// Per-channel standardization `(x - mean) / (std + eps)` over the positions of a `[C, P]` buffer.
pub fn standardize_forward(x: &[f64], c: usize, eps: f64) -> Vec<f64> {
    let p = x.len() / c;
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(p) {
        let mean = row.iter().sum::<f64>() / p as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p as f64;
        let s = libm::sqrt(var) + eps;
        out.extend(row.iter().map(|v| (v - mean) / s));
    }
    out
}

pub fn standardize_backward(gout: &[f64], x: &[f64], c: usize, eps: f64) -> Vec<f64> {
    let p = x.len() / c;
    let n = p as f64;
    let mut gx = Vec::with_capacity(x.len());
    for (row, grow) in x.chunks(p).zip(gout.chunks(p)) {
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sigma = libm::sqrt(var);
        let s = sigma + eps;
        let gmean = grow.iter().sum::<f64>() / n;
        let gd: f64 = grow.iter().zip(row).map(|(g, v)| g * (v - mean)).sum();
        let coef = if sigma > 0.0 { gd / (n * sigma * s * s) } else { 0.0 };
        gx.extend(
            grow.iter()
                .zip(row)
                .map(|(g, v)| (g - gmean) / s - (v - mean) * coef),
        );
    }
    gx
}

fn softmax_scaled(v: &[f64], tau: f64) -> Vec<f64> {
    let m = v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b * tau));
    let e: Vec<f64> = v.iter().map(|&x| libm::exp(x * tau - m)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

struct AttentionMaps {
    spatial: Vec<f64>,
    channel: Vec<f64>,
}

fn attention_maps(x: &[f64], c: usize, tau: f64) -> AttentionMaps {
    let p = x.len() / c;
    let mut a = vec![0.0; p];
    let mut b = vec![0.0; c];
    for (ch, row) in x.chunks(p).enumerate() {
        for (pos, v) in row.iter().enumerate() {
            a[pos] += libm::fabs(*v);
        }
        b[ch] = row.iter().map(|v| libm::fabs(*v)).sum::<f64>() / p as f64;
    }
    a.iter_mut().for_each(|v| *v /= c as f64);
    let spatial = softmax_scaled(&a, tau).into_iter().map(|v| v * p as f64).collect();
    let channel = softmax_scaled(&b, tau).into_iter().map(|v| v * c as f64).collect();
    AttentionMaps { spatial, channel }
}

/// `x * A_s[pos] * A_c[ch]` with spatial and channel softmax attention of the mean magnitudes.
pub fn attention_forward(x: &[f64], c: usize, tau: f64) -> Vec<f64> {
    let p = x.len() / c;
    let m = attention_maps(x, c, tau);
    let mut out = Vec::with_capacity(x.len());
    for (ch, row) in x.chunks(p).enumerate() {
        out.extend(
            row.iter()
                .zip(&m.spatial)
                .map(|(v, s)| v * s * m.channel[ch]),
        );
    }
    out
}

pub fn attention_backward(gout: &[f64], x: &[f64], c: usize, tau: f64) -> Vec<f64> {
    let p = x.len() / c;
    let m = attention_maps(x, c, tau);
    let mut g_sp = vec![0.0; p];
    let mut g_ch = vec![0.0; c];
    let mut gx = vec![0.0; x.len()];
    for ch in 0..c {
        for pos in 0..p {
            let i = ch * p + pos;
            let gy = gout[i];
            gx[i] = gy * m.spatial[pos] * m.channel[ch];
            g_sp[pos] += gy * x[i] * m.channel[ch];
            g_ch[ch] += gy * x[i] * m.spatial[pos];
        }
    }
    // back through A = n * softmax(tau * mean|x|)
    let back = |att: &[f64], g_att: &[f64], n: f64| -> Vec<f64> {
        let soft: Vec<f64> = att.iter().map(|a| a / n).collect();
        let gs: Vec<f64> = g_att.iter().map(|g| g * n).collect();
        let inner: f64 = soft.iter().zip(&gs).map(|(s, g)| s * g).sum();
        soft.iter()
            .zip(&gs)
            .map(|(s, g)| tau * s * (g - inner))
            .collect()
    };
    let g_a = back(&m.spatial, &g_sp, p as f64);
    let g_b = back(&m.channel, &g_ch, c as f64);
    for ch in 0..c {
        for pos in 0..p {
            let i = ch * p + pos;
            let sgn = if x[i] > 0.0 {
                1.0
            } else if x[i] < 0.0 {
                -1.0
            } else {
                0.0
            };
            gx[i] += sgn * (g_a[pos] / c as f64 + g_b[ch] / p as f64);
        }
    }
    gx
}

struct Moments {
    u: Vec<f64>,
    v: Vec<f64>,
    nu: f64,
    nv: f64,
}

fn centered(a: &[f64], b: &[f64]) -> Moments {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let u: Vec<f64> = a.iter().map(|x| x - ma).collect();
    let v: Vec<f64> = b.iter().map(|x| x - mb).collect();
    let nu = libm::sqrt(dot(&u, &u));
    let nv = libm::sqrt(dot(&v, &v));
    Moments { u, v, nu, nv }
}

fn is_flat(row: &[f64], norm: f64) -> bool {
    let scale = row.iter().fold(1.0f64, |m, v| m.max(libm::fabs(*v)));
    norm <= 1e-12 * scale * libm::sqrt(row.len() as f64)
}

/// Mean over channels of `1 - rho` (Pearson correlation over positions).
/// Returns the distance and the number of degenerate (flat) channel pairs,
/// for which `rho` is taken as 0.
pub fn pearson_forward(a: &[f64], b: &[f64], c: usize) -> (f64, usize) {
    let p = a.len() / c;
    let mut total = 0.0;
    let mut degenerate = 0;
    for (ra, rb) in a.chunks(p).zip(b.chunks(p)) {
        let m = centered(ra, rb);
        if is_flat(ra, m.nu) || is_flat(rb, m.nv) {
            degenerate += 1;
            total += 1.0;
            continue;
        }
        // sqrt(uu * vv) keeps rho exactly 1 for identical inputs
        let rho = dot(&m.u, &m.v) / libm::sqrt(dot(&m.u, &m.u) * dot(&m.v, &m.v));
        total += 1.0 - rho.clamp(-1.0, 1.0);
    }
    (total / c as f64, degenerate)
}

pub fn pearson_backward(gout: f64, a: &[f64], b: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let p = a.len() / c;
    let mut ga = Vec::with_capacity(a.len());
    let mut gb = Vec::with_capacity(b.len());
    let k = -gout / c as f64;
    for (ra, rb) in a.chunks(p).zip(b.chunks(p)) {
        let m = centered(ra, rb);
        if is_flat(ra, m.nu) || is_flat(rb, m.nv) {
            ga.extend(core::iter::repeat(0.0).take(p));
            gb.extend(core::iter::repeat(0.0).take(p));
            continue;
        }
        let rho = dot(&m.u, &m.v) / (m.nu * m.nv);
        let (nn, nu2, nv2) = (m.nu * m.nv, m.nu * m.nu, m.nv * m.nv);
        ga.extend(m.u.iter().zip(&m.v).map(|(u, v)| k * (v / nn - rho * u / nu2)));
        gb.extend(m.u.iter().zip(&m.v).map(|(u, v)| k * (u / nn - rho * v / nv2)));
    }
    (ga, gb)
}

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Dynamic range of `a` and `b` together, with the positions of the extremes.
fn joint_range(a: &[f64], b: &[f64]) -> (f64, usize, usize) {
    let mut lo = (f64::INFINITY, 0);
    let mut hi = (f64::NEG_INFINITY, 0);
    for (i, &v) in a.iter().chain(b).enumerate() {
        if v < lo.0 {
            lo = (v, i);
        }
        if v > hi.0 {
            hi = (v, i);
        }
    }
    (hi.0 - lo.0, hi.1, lo.1)
}

struct SsimTerms {
    n1: f64,
    n2: f64,
    d1: f64,
    d2: f64,
    ma: f64,
    mb: f64,
}

fn ssim_terms(ra: &[f64], rb: &[f64], c1: f64, c2: f64) -> SsimTerms {
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cab) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(rb) {
        let (dx, dy) = (x - ma, y - mb);
        va += dx * dx;
        vb += dy * dy;
        cab += dx * dy;
    }
    let (va, vb, cab) = (va / n, vb / n, cab / n);
    SsimTerms {
        n1: 2.0 * ma * mb + c1,
        n2: 2.0 * cab + c2,
        d1: ma * ma + mb * mb + c1,
        d2: va + vb + c2,
        ma,
        mb,
    }
}

/// Dynamic range used for the SSIM stabilizers; a flat pair falls back to 1.
fn ssim_range(a: &[f64], b: &[f64]) -> (f64, Option<(usize, usize)>) {
    let (l, hi, lo) = joint_range(a, b);
    if l > 0.0 {
        (l, Some((hi, lo)))
    } else {
        (1.0, None)
    }
}

/// Mean over channels of `1 - SSIM`, each channel's SSIM computed from global statistics.
pub fn ssim_forward(a: &[f64], b: &[f64], c: usize) -> f64 {
    let p = a.len() / c;
    let (l, _) = ssim_range(a, b);
    let c1 = (SSIM_K1 * l) * (SSIM_K1 * l);
    let c2 = (SSIM_K2 * l) * (SSIM_K2 * l);
    let mut total = 0.0;
    for (ra, rb) in a.chunks(p).zip(b.chunks(p)) {
        let t = ssim_terms(ra, rb, c1, c2);
        total += 1.0 - (t.n1 * t.n2) / (t.d1 * t.d2);
    }
    (total / c as f64).max(0.0)
}

pub fn ssim_backward(gout: f64, a: &[f64], b: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let p = a.len() / c;
    let n = p as f64;
    let (l, extremes) = ssim_range(a, b);
    let c1 = (SSIM_K1 * l) * (SSIM_K1 * l);
    let c2 = (SSIM_K2 * l) * (SSIM_K2 * l);
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    // d(loss)/dS for every channel
    let k = -gout / c as f64;
    let mut g_l = 0.0;
    for (ch, (ra, rb)) in a.chunks(p).zip(b.chunks(p)).enumerate() {
        let t = ssim_terms(ra, rb, c1, c2);
        let den = t.d1 * t.d2;
        let s = t.n1 * t.n2 / den;
        let ds_dn1 = t.n2 / den;
        let ds_dn2 = t.n1 / den;
        let ds_dd1 = -s / t.d1;
        let ds_dd2 = -s / t.d2;
        // chain through mu, variances and covariance
        let g_ma = k * (ds_dn1 * 2.0 * t.mb + ds_dd1 * 2.0 * t.ma);
        let g_mb = k * (ds_dn1 * 2.0 * t.ma + ds_dd1 * 2.0 * t.mb);
        let g_cab = k * ds_dn2 * 2.0;
        let g_var = k * ds_dd2;
        for j in 0..p {
            let (dx, dy) = (ra[j] - t.ma, rb[j] - t.mb);
            ga[ch * p + j] = g_ma / n + g_cab * dy / n + g_var * 2.0 * dx / n;
            gb[ch * p + j] = g_mb / n + g_cab * dx / n + g_var * 2.0 * dy / n;
        }
        // C1 enters both N1 and D1, C2 enters N2 and D2
        let g_c1 = k * (ds_dn1 + ds_dd1);
        let g_c2 = k * (ds_dn2 + ds_dd2);
        g_l += g_c1 * 2.0 * SSIM_K1 * SSIM_K1 * l + g_c2 * 2.0 * SSIM_K2 * SSIM_K2 * l;
    }
    if let Some((hi, lo)) = extremes {
        let mut bump = |idx: usize, v: f64| {
            if idx < a.len() {
                ga[idx] += v;
            } else {
                gb[idx - a.len()] += v;
            }
        };
        bump(hi, g_l);
        bump(lo, -g_l);
    }
    (ga, gb)
}
