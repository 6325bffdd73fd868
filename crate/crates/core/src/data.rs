//! Synthetic dense-prediction task.
//!
//! Each 32x32 image holds a few squares, disks and crosses drawn over a dark
//! background with overlapping per-class intensity ranges, so the class of a
//! cell is decided by local geometry rather than brightness. Labels are
//! per-cell class maps at every pyramid scale. Training labels carry
//! random flips; evaluation labels are always clean.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::digest::digest_tensors;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const BACKGROUND: usize = 0;
pub const SQUARE: usize = 1;
pub const DISK: usize = 2;
pub const CROSS: usize = 3;
pub const CLASSES: usize = 4;

pub const PIXEL_NOISE: f64 = 0.05;
const PLACEMENT_TRIES: usize = 32;

/// Intensity range per foreground class; the ranges overlap on purpose.
const INTENSITY: [(f64, f64); 3] = [(0.30, 0.80), (0.40, 0.90), (0.50, 1.00)];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DataConfig {
    /// Training samples; they take indices `0..n_samples`.
    pub n_samples: usize,
    /// Evaluation samples; they take the indices after the training ones.
    pub n_eval: usize,
    pub label_noise_rate: f64,
    /// Inclusive range of shapes per image.
    pub shapes_per_image: (usize, usize),
    pub overlap_allowed: bool,
    pub seed: u64,
    pub image_size: usize,
    pub scales: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_samples: 2000,
            n_eval: 500,
            label_noise_rate: 0.2,
            shapes_per_image: (1, 4),
            overlap_allowed: true,
            seed: 0,
            image_size: 32,
            scales: 3,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.label_noise_rate) {
            return Err(Error::InvalidConfig(format!(
                "label_noise_rate must lie in [0, 0.5), got {}",
                self.label_noise_rate
            )));
        }
        let (lo, hi) = self.shapes_per_image;
        if lo > hi {
            return Err(Error::InvalidConfig(format!("empty shapes_per_image range {lo}..={hi}")));
        }
        if self.scales == 0 || self.image_size % (1 << (self.scales - 1)) != 0 {
            return Err(Error::InvalidConfig(format!(
                "image size {} does not support {} scales",
                self.image_size, self.scales
            )));
        }
        if self.image_size < 16 {
            return Err(Error::InvalidConfig("image_size must be at least 16".into()));
        }
        Ok(())
    }

    pub fn is_train(&self, index: usize) -> bool {
        index < self.n_samples
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapeKind {
    /// Cells with `top <= y < top + side` and `left <= x < left + side`.
    Square { top: usize, left: usize, side: usize },
    /// Cells with `(y - cy)^2 + (x - cx)^2 <= r^2`.
    Disk { cy: usize, cx: usize, r: usize },
    /// Horizontal and vertical bars of half-length `arm` and half-width `half`.
    Cross { cy: usize, cx: usize, arm: usize, half: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub intensity: f64,
}

impl Shape {
    pub fn class(&self) -> usize {
        match self.kind {
            ShapeKind::Square { .. } => SQUARE,
            ShapeKind::Disk { .. } => DISK,
            ShapeKind::Cross { .. } => CROSS,
        }
    }

    pub fn covers(&self, y: usize, x: usize) -> bool {
        let d = |a: usize, b: usize| a.abs_diff(b);
        match self.kind {
            ShapeKind::Square { top, left, side } => (top..top + side).contains(&y) && (left..left + side).contains(&x),
            ShapeKind::Disk { cy, cx, r } => d(y, cy).pow(2) + d(x, cx).pow(2) <= r * r,
            ShapeKind::Cross { cy, cx, arm, half } => {
                (d(y, cy) <= half && d(x, cx) <= arm) || (d(x, cx) <= half && d(y, cy) <= arm)
            }
        }
    }

    /// Inclusive bounding box `(y0, x0, y1, x1)`.
    pub fn bounds(&self) -> (usize, usize, usize, usize) {
        match self.kind {
            ShapeKind::Square { top, left, side } => (top, left, top + side - 1, left + side - 1),
            ShapeKind::Disk { cy, cx, r } => (cy - r, cx - r, cy + r, cx + r),
            ShapeKind::Cross { cy, cx, arm, .. } => (cy - arm, cx - arm, cy + arm, cx + arm),
        }
    }
}

fn random_shape(rng: &mut Rng, size: usize) -> Shape {
    let class = 1 + rng.below(3) as usize;
    let (lo, hi) = INTENSITY[class - 1];
    let intensity = rng.uniform_in(lo, hi);
    let kind = match class {
        SQUARE => {
            let side = rng.range_inclusive(8, 14);
            ShapeKind::Square {
                top: rng.range_inclusive(0, size - side),
                left: rng.range_inclusive(0, size - side),
                side,
            }
        }
        DISK => {
            let r = rng.range_inclusive(4, 7);
            ShapeKind::Disk {
                cy: rng.range_inclusive(r, size - 1 - r),
                cx: rng.range_inclusive(r, size - 1 - r),
                r,
            }
        }
        _ => {
            let arm = rng.range_inclusive(5, 9);
            ShapeKind::Cross {
                cy: rng.range_inclusive(arm, size - 1 - arm),
                cx: rng.range_inclusive(arm, size - 1 - arm),
                arm,
                half: rng.range_inclusive(1, 2),
            }
        }
    };
    Shape { kind, intensity }
}

fn boxes_overlap(a: &Shape, b: &Shape) -> bool {
    let (ay0, ax0, ay1, ax1) = a.bounds();
    let (by0, bx0, by1, bx1) = b.bounds();
    ay0 <= by1 && by0 <= ay1 && ax0 <= bx1 && bx0 <= ax1
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub index: usize,
    /// `[1, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    /// Row-major class maps, finest first; scale `i` is `H/2^i x W/2^i`.
    pub labels: Vec<Vec<usize>>,
    /// Shapes in drawing order; later shapes cover earlier ones.
    pub shapes: Vec<Shape>,
}

/// Majority class of each `factor x factor` block; ties go to the lowest
/// class index.
pub fn majority_downsample(labels: &[usize], h: usize, w: usize, factor: usize) -> Vec<usize> {
    let (ho, wo) = (h / factor, w / factor);
    let mut out = Vec::with_capacity(ho * wo);
    for y in 0..ho {
        for x in 0..wo {
            let mut counts = [0usize; CLASSES];
            for dy in 0..factor {
                let row = (y * factor + dy) * w + x * factor;
                for &c in &labels[row..row + factor] {
                    counts[c] += 1;
                }
            }
            let mut best = 0;
            for c in 1..CLASSES {
                if counts[c] > counts[best] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    out
}

/// Label pyramid; scale `s` is the block majority of the finest map.
pub fn label_pyramid(fine: Vec<usize>, size: usize, scales: usize) -> Vec<Vec<usize>> {
    let coarse: Vec<Vec<usize>> = (1..scales)
        .map(|s| majority_downsample(&fine, size, size, 1 << s))
        .collect();
    let mut levels = vec![fine];
    levels.extend(coarse);
    levels
}

/// Shapes, image and clean finest-scale labels for `index`.
fn render(cfg: &DataConfig, index: usize) -> (Vec<Shape>, Tensor, Vec<usize>) {
    let root = Rng::new(cfg.seed).fork(index as u64);
    let size = cfg.image_size;
    let mut geo = root.fork(0);
    let (lo, hi) = cfg.shapes_per_image;
    let count = geo.range_inclusive(lo, hi);
    let mut shapes: Vec<Shape> = Vec::with_capacity(count);
    for _ in 0..count {
        for _ in 0..PLACEMENT_TRIES {
            let s = random_shape(&mut geo, size);
            if cfg.overlap_allowed || shapes.iter().all(|o| !boxes_overlap(o, &s)) {
                shapes.push(s);
                break;
            }
        }
    }
    let mut labels = vec![BACKGROUND; size * size];
    let mut clean = vec![0.0; size * size];
    for s in &shapes {
        for y in 0..size {
            for x in 0..size {
                if s.covers(y, x) {
                    labels[y * size + x] = s.class();
                    clean[y * size + x] = s.intensity;
                }
            }
        }
    }
    let mut noise = root.fork(2);
    let pixels = clean
        .iter()
        .map(|&v| (v + PIXEL_NOISE * noise.normal()).clamp(0.0, 1.0))
        .collect();
    let image = Tensor::new(&[1, size, size], pixels).expect("image shape");
    (shapes, image, labels)
}

/// Flips each foreground cell to a uniformly chosen other class with
/// probability `rate`.
fn flip_labels(labels: &mut [usize], rate: f64, rng: &mut Rng) {
    for l in labels.iter_mut() {
        if *l == BACKGROUND {
            continue;
        }
        if rng.uniform() < rate {
            let k = rng.below(CLASSES as u64 - 1) as usize;
            *l = if k >= *l { k + 1 } else { k };
        }
    }
}

/// Sample `index` without label noise.
pub fn gen_clean_sample(cfg: &DataConfig, index: usize) -> Sample {
    let (shapes, image, fine) = render(cfg, index);
    Sample {
        index,
        image,
        labels: label_pyramid(fine, cfg.image_size, cfg.scales),
        shapes,
    }
}

/// Sample `index`; training indices get label noise, evaluation ones do not.
pub fn gen_sample(cfg: &DataConfig, index: usize) -> Sample {
    let (shapes, image, mut fine) = render(cfg, index);
    if cfg.is_train(index) && cfg.label_noise_rate > 0.0 {
        let mut rng = Rng::new(cfg.seed).fork(index as u64).fork(1);
        flip_labels(&mut fine, cfg.label_noise_rate, &mut rng);
    }
    Sample {
        index,
        image,
        labels: label_pyramid(fine, cfg.image_size, cfg.scales),
        shapes,
    }
}

/// Training split (noisy, indices `0..n_samples`) and evaluation split
/// (clean, the next `n_eval` indices).
pub fn gen_split(cfg: &DataConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    cfg.validate()?;
    let train = (0..cfg.n_samples).map(|i| gen_sample(cfg, i)).collect();
    let eval = (cfg.n_samples..cfg.n_samples + cfg.n_eval)
        .map(|i| gen_sample(cfg, i))
        .collect();
    Ok((train, eval))
}

/// SHA-256 over every image and label map, in sample order.
pub fn digest(samples: &[Sample]) -> String {
    let label_tensors: Vec<Tensor> = samples
        .iter()
        .flat_map(|s| {
            s.labels
                .iter()
                .map(|l| Tensor::new(&[l.len()], l.iter().map(|&c| c as f64).collect()).expect("non-empty labels"))
        })
        .collect();
    digest_tensors(samples.iter().map(|s| &s.image).chain(label_tensors.iter()))
}

/// Fraction of cells per class at `scale`.
pub fn class_frequencies(samples: &[Sample], scale: usize) -> [f64; CLASSES] {
    let mut counts = [0usize; CLASSES];
    let mut total = 0usize;
    for s in samples {
        for &c in &s.labels[scale] {
            counts[c] += 1;
            total += 1;
        }
    }
    let mut out = [0.0; CLASSES];
    if total > 0 {
        for (o, c) in out.iter_mut().zip(counts) {
            *o = c as f64 / total as f64;
        }
    }
    out
}
