//! Knowledge extraction, transfer distances and the distillation losses.
//!
//! The ET loss compares `extract(F_T)` with `extract(g(F_S))`. The UET loss
//! first replaces one or both sides with the Monte-Carlo estimate combined
//! with the original features, `U_K + F`. All functions take the adapted
//! student pyramid, so adapter gradients flow through whatever executor the
//! caller used to build it.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{invalid_arg, Error, Result};
use crate::model::{DetNet, Pyramid};
use crate::rng::Rng;
use crate::tensor::{Exec, Tensor};
use crate::uncertainty::{combine_residual, estimate_uncertainty, RatioSchedule, RatioStrategy};

/// Added to the channel std by pearson-norm extraction.
pub const STANDARDIZE_EPS: f64 = 1e-6;
/// Sharpness of the spatial and channel attention softmaxes.
pub const ATTENTION_TAU: f64 = 0.25;
/// Softmax temperature for logits distillation.
pub const KD_TEMPERATURE: f64 = 2.0;

/// Knowledge extraction applied to both sides before the distance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Extraction {
    /// Raw features.
    Identity,
    /// Per-channel standardization over spatial positions.
    PearsonNorm,
    /// Features reweighted by spatial and channel attention.
    Attention,
}

impl Extraction {
    pub const ALL: [Extraction; 3] = [Self::Identity, Self::PearsonNorm, Self::Attention];

    pub fn name(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::PearsonNorm => "pearson-norm",
            Self::Attention => "attention",
        }
    }
}

/// Transfer distance between extracted pyramids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Distance {
    L2,
    Pearson,
    Ssim,
}

impl Distance {
    pub const ALL: [Distance; 3] = [Self::L2, Self::Pearson, Self::Ssim];

    pub fn name(self) -> &'static str {
        match self {
            Self::L2 => "l2",
            Self::Pearson => "pearson",
            Self::Ssim => "ssim",
        }
    }
}

/// Which side's features are replaced by their uncertainty-combined version.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KnowledgeSource {
    None,
    Teacher,
    Student,
    Both,
}

impl KnowledgeSource {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Teacher => "teacher",
            Self::Student => "student",
            Self::Both => "both",
        }
    }

    fn teacher_side(self) -> bool {
        matches!(self, Self::Teacher | Self::Both)
    }

    fn student_side(self) -> bool {
        matches!(self, Self::Student | Self::Both)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillConfig {
    /// Number of dropout passes. Overrides `schedule.n`; 0 means plain ET.
    pub n: usize,
    pub schedule: RatioSchedule,
    pub extraction: Extraction,
    pub distance: Distance,
    pub source: KnowledgeSource,
    pub residual: bool,
    /// Scale `U_K + F` by 0.5.
    pub halve_residual: bool,
    pub lambda_kd: f64,
    /// Distill head outputs (KL at `temperature`) instead of features.
    pub logits_mode: bool,
    pub temperature: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self::uet_default()
    }
}

impl DistillConfig {
    /// Plain extraction-transfer distillation.
    pub fn et() -> Self {
        DistillConfig {
            n: 0,
            schedule: RatioSchedule::default(),
            extraction: Extraction::Attention,
            distance: Distance::L2,
            source: KnowledgeSource::None,
            residual: false,
            halve_residual: false,
            lambda_kd: 1.0,
            logits_mode: false,
            temperature: KD_TEMPERATURE,
        }
    }

    /// Teacher-side uncertainty, five passes, arithmetic ratios, residual on.
    pub fn uet_default() -> Self {
        DistillConfig {
            n: 5,
            schedule: RatioSchedule::new(RatioStrategy::Arithmetic, 5),
            source: KnowledgeSource::Teacher,
            residual: true,
            ..Self::et()
        }
    }

    pub fn is_uet(&self) -> bool {
        self.source != KnowledgeSource::None
    }

    /// The schedule with `n` applied.
    pub fn effective_schedule(&self) -> RatioSchedule {
        RatioSchedule { n: self.n, ..self.schedule }
    }

    pub fn ratios(&self, epoch: usize) -> Vec<f64> {
        if self.is_uet() {
            self.effective_schedule().ratios(epoch)
        } else {
            Vec::new()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_kd.is_finite() && self.lambda_kd > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda_kd must be finite and positive, got {}",
                self.lambda_kd
            )));
        }
        if self.n == 0 && self.is_uet() {
            return Err(Error::InvalidConfig("n = 0 requires source = none".into()));
        }
        if self.is_uet() {
            self.effective_schedule().validate()?;
        }
        if self.logits_mode {
            if !(self.temperature.is_finite() && self.temperature > 0.0) {
                return Err(Error::InvalidConfig("temperature must be finite and positive".into()));
            }
            if self.source.student_side() {
                return Err(Error::InvalidConfig(
                    "logits mode supports source = none or teacher".into(),
                ));
            }
        }
        Ok(())
    }

    /// Report label: the two reference configurations get fixed names.
    pub fn label(&self) -> String {
        let et = Self::et();
        if !self.is_uet()
            && !self.logits_mode
            && (self.extraction, self.distance, self.lambda_kd) == (et.extraction, et.distance, et.lambda_kd)
        {
            return "ET baseline".into();
        }
        if *self == Self::uet_default() {
            return "UET default".into();
        }
        let mode = if self.logits_mode {
            String::from("logits")
        } else {
            format!("{}+{}", self.extraction.name(), self.distance.name())
        };
        if !self.is_uet() {
            return format!("ET {mode}");
        }
        format!(
            "UET {mode} source={} n={} strategy={} residual={}",
            self.source.name(),
            self.n,
            self.schedule.strategy.letter(),
            if self.residual { "on" } else { "off" }
        )
    }
}

pub fn extract<E: Exec>(e: &mut E, kind: Extraction, f: &Pyramid<E::Val>) -> Result<Pyramid<E::Val>> {
    match kind {
        Extraction::Identity => Ok(f.clone()),
        Extraction::PearsonNorm => f
            .iter()
            .map(|x| e.standardize_channels(x, STANDARDIZE_EPS))
            .collect::<Result<Vec<_>>>()
            .map(Pyramid),
        Extraction::Attention => f
            .iter()
            .map(|x| e.attention(x, ATTENTION_TAU))
            .collect::<Result<Vec<_>>>()
            .map(Pyramid),
    }
}

/// A scalar distance plus the number of flat channels pearson met.
#[derive(Clone, Debug)]
pub struct DistanceValue<V> {
    pub loss: V,
    pub degenerate: usize,
}

fn same_scales<V>(op: &'static str, a: &Pyramid<V>, b: &Pyramid<V>) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(invalid_arg(
            op,
            format!("pyramids have {} and {} scales", a.len(), b.len()),
        ));
    }
    Ok(())
}

/// Mean over scales of the per-scale distance.
pub fn distance<E: Exec>(
    e: &mut E,
    kind: Distance,
    a: &Pyramid<E::Val>,
    b: &Pyramid<E::Val>,
) -> Result<DistanceValue<E::Val>> {
    same_scales("distance", a, b)?;
    let mut degenerate = 0;
    let mut total: Option<E::Val> = None;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = match kind {
            Distance::L2 => e.mse(x, y)?,
            Distance::Pearson => {
                let (d, flat) = e.pearson_distance(x, y)?;
                degenerate += flat;
                d
            }
            Distance::Ssim => e.ssim_distance(x, y)?,
        };
        total = Some(match total {
            None => d,
            Some(t) => e.add(&t, &d)?,
        });
    }
    let total = total.expect("non-empty pyramid");
    let loss = e.scale(&total, 1.0 / a.len() as f64);
    Ok(DistanceValue { loss, degenerate })
}

/// A distillation loss and what produced it.
#[derive(Clone, Debug)]
pub struct KdLoss<V> {
    pub loss: V,
    pub degenerate: usize,
    pub ratios: Vec<f64>,
}

fn untracked_teacher<E: Exec>(e: &E, f_t: &Pyramid<E::Val>) -> Result<()> {
    if f_t.iter().any(|x| e.is_tracked(x)) {
        return Err(invalid_arg("kd_loss", "teacher pyramid must not carry gradients"));
    }
    Ok(())
}

fn transfer<E: Exec>(
    e: &mut E,
    target: &Pyramid<E::Val>,
    student: &Pyramid<E::Val>,
    cfg: &DistillConfig,
    ratios: Vec<f64>,
) -> Result<KdLoss<E::Val>> {
    let t = extract(e, cfg.extraction, target)?;
    let s = extract(e, cfg.extraction, student)?;
    let d = distance(e, cfg.distance, &t, &s)?;
    Ok(KdLoss {
        loss: e.scale(&d.loss, cfg.lambda_kd),
        degenerate: d.degenerate,
        ratios,
    })
}

/// `lambda * d(f(F_T), f(g(F_S)))`.
pub fn kd_loss_et<E: Exec>(
    e: &mut E,
    f_t: &Pyramid<E::Val>,
    f_s_adapted: &Pyramid<E::Val>,
    cfg: &DistillConfig,
) -> Result<KdLoss<E::Val>> {
    same_scales("kd_loss_et", f_t, f_s_adapted)?;
    untracked_teacher(e, f_t)?;
    transfer(e, f_t, f_s_adapted, cfg, Vec::new())
}

/// Uncertainty-combined pyramid for one side; `rng` feeds the dropout passes.
fn uncertain_side<E: Exec>(
    e: &mut E,
    f: &Pyramid<E::Val>,
    cfg: &DistillConfig,
    ratios: &[f64],
    rng: &Rng,
) -> Result<Pyramid<E::Val>> {
    let u = estimate_uncertainty(e, f, ratios, rng)?;
    combine_residual(e, &u, f, cfg.residual, cfg.halve_residual)
}

/// The UET loss. Teacher masks come from `rng.fork(0)`, student masks from
/// `rng.fork(1)`. With `source = none` this is [`kd_loss_et`].
pub fn kd_loss_uet<E: Exec>(
    e: &mut E,
    f_t: &Pyramid<E::Val>,
    f_s_adapted: &Pyramid<E::Val>,
    cfg: &DistillConfig,
    rng: &Rng,
    epoch: usize,
) -> Result<KdLoss<E::Val>> {
    if !cfg.is_uet() {
        return kd_loss_et(e, f_t, f_s_adapted, cfg);
    }
    if cfg.n == 0 {
        return Err(Error::InvalidConfig("n = 0 requires source = none".into()));
    }
    same_scales("kd_loss_uet", f_t, f_s_adapted)?;
    untracked_teacher(e, f_t)?;
    let ratios = cfg.ratios(epoch);
    let target = if cfg.source.teacher_side() {
        uncertain_side(e, f_t, cfg, &ratios, &rng.fork(0))?
    } else {
        f_t.clone()
    };
    let student = if cfg.source.student_side() {
        uncertain_side(e, f_s_adapted, cfg, &ratios, &rng.fork(1))?
    } else {
        f_s_adapted.clone()
    };
    transfer(e, &target, &student, cfg, ratios)
}

/// Logits distillation from a precomputed teacher pyramid.
///
/// The teacher side is optionally replaced by its uncertainty combination
/// before the teacher head; the loss is `lambda` times the mean over scales of
/// `KL(teacher || student)` at `cfg.temperature`.
pub fn kd_loss_logits_from<E: Exec>(
    e: &mut E,
    teacher: &DetNet,
    f_t: &Pyramid<E::Val>,
    student_logits: &Pyramid<E::Val>,
    cfg: &DistillConfig,
    rng: &Rng,
    epoch: usize,
) -> Result<KdLoss<E::Val>> {
    untracked_teacher(e, f_t)?;
    if cfg.source.student_side() {
        return Err(Error::InvalidConfig("logits mode supports source = none or teacher".into()));
    }
    same_scales("kd_loss_logits", f_t, student_logits)?;
    let (features, ratios) = if cfg.is_uet() {
        if cfg.n == 0 {
            return Err(Error::InvalidConfig("n = 0 requires source = none".into()));
        }
        let ratios = cfg.ratios(epoch);
        (uncertain_side(e, f_t, cfg, &ratios, &rng.fork(0))?, ratios)
    } else {
        (f_t.clone(), Vec::new())
    };
    let t_logits = teacher.forward_head(e, &features)?;
    let mut total: Option<E::Val> = None;
    for (t, s) in t_logits.iter().zip(student_logits.iter()) {
        let (tc, sc) = (e.value(t).shape()[0], e.value(s).shape()[0]);
        if tc != sc {
            return Err(invalid_arg(
                "kd_loss_logits",
                format!("teacher predicts {tc} classes, student {sc}"),
            ));
        }
        let kl = e.kl_div(t, s, cfg.temperature)?;
        total = Some(match total {
            None => kl,
            Some(acc) => e.add(&acc, &kl)?,
        });
    }
    let total = total.expect("non-empty pyramid");
    let mean = e.scale(&total, 1.0 / t_logits.len() as f64);
    Ok(KdLoss {
        loss: e.scale(&mean, cfg.lambda_kd),
        degenerate: 0,
        ratios,
    })
}

/// Logits distillation for one image, running both networks.
pub fn kd_loss_logits<E: Exec>(
    e: &mut E,
    teacher: &DetNet,
    student: &DetNet,
    image: &Tensor,
    cfg: &DistillConfig,
    rng: &Rng,
    epoch: usize,
) -> Result<KdLoss<E::Val>> {
    if teacher.spec.num_classes != student.spec.num_classes {
        return Err(invalid_arg(
            "kd_loss_logits",
            format!(
                "teacher predicts {} classes, student {}",
                teacher.spec.num_classes, student.spec.num_classes
            ),
        ));
    }
    let f_t = teacher.forward_pyramid(e, image)?;
    let f_s = student.forward_pyramid(e, image)?;
    let s_logits = student.forward_head(e, &f_s)?;
    kd_loss_logits_from(e, teacher, &f_t, &s_logits, cfg, rng, epoch)
}
