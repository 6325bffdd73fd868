//! JSON configuration. Field names follow the core types; unknown fields are
//! rejected and every section has defaults, so `{}` is a valid experiment.

use std::path::Path;

use serde::{Deserialize, Serialize};
use uet_core::data::DataConfig;
use uet_core::distill::{DistillConfig, Distance, Extraction, KnowledgeSource};
use uet_core::optim::{OptimConfig, OptimizerKind};
use uet_core::uncertainty::{RatioSchedule, RatioStrategy};

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StrategyName {
    #[serde(rename = "A-fixed", alias = "A")]
    A,
    #[serde(rename = "B-arithmetic", alias = "B")]
    B,
    #[serde(rename = "C-epoch-growing", alias = "C")]
    C,
}

impl From<StrategyName> for RatioStrategy {
    fn from(s: StrategyName) -> Self {
        match s {
            StrategyName::A => RatioStrategy::Fixed,
            StrategyName::B => RatioStrategy::Arithmetic,
            StrategyName::C => RatioStrategy::EpochGrowing,
        }
    }
}

impl From<RatioStrategy> for StrategyName {
    fn from(s: RatioStrategy) -> Self {
        match s {
            RatioStrategy::Fixed => StrategyName::A,
            RatioStrategy::Arithmetic => StrategyName::B,
            RatioStrategy::EpochGrowing => StrategyName::C,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractionName {
    Identity,
    PearsonNorm,
    Attention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceName {
    L2,
    Pearson,
    Ssim,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceName {
    None,
    Teacher,
    Student,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerName {
    SgdMomentum,
    Adam,
}

macro_rules! mirror {
    ($name:ident <-> $core:ident { $($a:ident = $b:ident),* $(,)? }) => {
        impl From<$name> for $core {
            fn from(v: $name) -> Self {
                match v { $($name::$a => $core::$b),* }
            }
        }
        impl From<$core> for $name {
            fn from(v: $core) -> Self {
                match v { $($core::$b => $name::$a),* }
            }
        }
    };
}

mirror!(ExtractionName <-> Extraction { Identity = Identity, PearsonNorm = PearsonNorm, Attention = Attention });
mirror!(DistanceName <-> Distance { L2 = L2, Pearson = Pearson, Ssim = Ssim });
mirror!(SourceName <-> KnowledgeSource { None = None, Teacher = Teacher, Student = Student, Both = Both });
mirror!(OptimizerName <-> OptimizerKind { SgdMomentum = SgdMomentum, Adam = Adam });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub strategy: StrategyName,
    /// Optional; must agree with the enclosing distill `N` when given.
    #[serde(rename = "N", skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    pub base: f64,
    pub step: f64,
    pub epoch_growth: f64,
    pub clamp_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::from_core(&RatioSchedule::default(), false)
    }
}

impl ScheduleConfig {
    fn from_core(s: &RatioSchedule, with_n: bool) -> Self {
        ScheduleConfig {
            strategy: s.strategy.into(),
            n: with_n.then_some(s.n),
            base: s.base,
            step: s.step,
            epoch_growth: s.epoch_growth,
            clamp_max: s.clamp_max,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    #[serde(rename = "N")]
    pub n: usize,
    pub schedule: ScheduleConfig,
    pub extraction: ExtractionName,
    pub distance: DistanceName,
    pub source: SourceName,
    pub residual: bool,
    pub lambda_kd: f64,
    pub logits_mode: bool,
    pub halve_residual: bool,
    pub temperature: f64,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self::from_core(&DistillConfig::uet_default())
    }
}

impl DistillSection {
    pub fn from_core(c: &DistillConfig) -> Self {
        DistillSection {
            n: c.n,
            schedule: ScheduleConfig::from_core(&c.schedule, false),
            extraction: c.extraction.into(),
            distance: c.distance.into(),
            source: c.source.into(),
            residual: c.residual,
            lambda_kd: c.lambda_kd,
            logits_mode: c.logits_mode,
            halve_residual: c.halve_residual,
            temperature: c.temperature,
        }
    }

    pub fn to_core(&self) -> Result<DistillConfig> {
        if let Some(n) = self.schedule.n {
            if n != self.n {
                return Err(HarnessError::Config(format!(
                    "schedule.N = {n} disagrees with N = {}",
                    self.n
                )));
            }
        }
        let s = &self.schedule;
        let cfg = DistillConfig {
            n: self.n,
            schedule: RatioSchedule {
                strategy: s.strategy.into(),
                n: self.n.max(1),
                base: s.base,
                step: s.step,
                epoch_growth: s.epoch_growth,
                clamp_max: s.clamp_max,
            },
            extraction: self.extraction.into(),
            distance: self.distance.into(),
            source: self.source.into(),
            residual: self.residual,
            halve_residual: self.halve_residual,
            lambda_kd: self.lambda_kd,
            logits_mode: self.logits_mode,
            temperature: self.temperature,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Plain-ET section: no uncertainty estimate.
pub fn et_section() -> DistillSection {
    DistillSection::from_core(&DistillConfig::et())
}

pub const DEFAULT_MAX_GRAD_NORM: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerName,
    /// Global gradient-norm clip; `null` disables it.
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
    /// Absent for teacher pretraining and from-scratch students.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distill: Option<DistillSection>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            lr: 0.05,
            optimizer: OptimizerName::SgdMomentum,
            max_grad_norm: Some(DEFAULT_MAX_GRAD_NORM),
            seed: 0,
            distill: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(HarnessError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(HarnessError::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(HarnessError::Config(format!("lr must be finite and positive, got {}", self.lr)));
        }
        if let Some(m) = self.max_grad_norm {
            if !(m.is_finite() && m > 0.0) {
                return Err(HarnessError::Config(format!("max_grad_norm must be finite and positive, got {m}")));
            }
        }
        if let Some(d) = &self.distill {
            d.to_core()?;
        }
        Ok(())
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            max_grad_norm: self.max_grad_norm,
            ..OptimConfig::of(self.optimizer.into())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_samples: usize,
    pub n_eval: usize,
    pub label_noise_rate: f64,
    pub shapes_per_image: [usize; 2],
    pub overlap_allowed: bool,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DataConfig::default();
        DataSection {
            n_samples: d.n_samples,
            n_eval: d.n_eval,
            label_noise_rate: d.label_noise_rate,
            shapes_per_image: [d.shapes_per_image.0, d.shapes_per_image.1],
            overlap_allowed: d.overlap_allowed,
            seed: d.seed,
        }
    }
}

impl DataSection {
    pub fn to_core(&self) -> Result<DataConfig> {
        let d = DataConfig {
            n_samples: self.n_samples,
            n_eval: self.n_eval,
            label_noise_rate: self.label_noise_rate,
            shapes_per_image: (self.shapes_per_image[0], self.shapes_per_image[1]),
            overlap_allowed: self.overlap_allowed,
            seed: self.seed,
            ..DataConfig::default()
        };
        d.validate()?;
        if d.n_samples == 0 || d.n_eval == 0 {
            return Err(HarnessError::Config("n_samples and n_eval must be positive".into()));
        }
        Ok(d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSize {
    pub width: usize,
    pub depth: usize,
}

impl ModelSize {
    pub const TEACHER: ModelSize = ModelSize { width: 32, depth: 3 };
    pub const STUDENT: ModelSize = ModelSize { width: 8, depth: 2 };

    /// Half width and half depth, at least 4 wide and 1 deep.
    pub fn half(self) -> ModelSize {
        ModelSize {
            width: (self.width / 2).max(4),
            depth: (self.depth / 2).max(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub width: usize,
    pub depth: usize,
    pub train: TrainConfig,
}

impl ModelSection {
    pub fn size(&self) -> ModelSize {
        ModelSize {
            width: self.width,
            depth: self.depth,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        Self::student()
    }
}

impl ModelSection {
    pub fn teacher() -> Self {
        ModelSection {
            width: ModelSize::TEACHER.width,
            depth: ModelSize::TEACHER.depth,
            train: TrainConfig {
                epochs: 30,
                ..TrainConfig::default()
            },
        }
    }

    pub fn student() -> Self {
        ModelSection {
            width: ModelSize::STUDENT.width,
            depth: ModelSize::STUDENT.depth,
            train: TrainConfig {
                distill: Some(DistillSection::default()),
                ..TrainConfig::default()
            },
        }
    }
}

fn teacher_section() -> ModelSection {
    ModelSection::teacher()
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

/// Everything a command may need. Sections a command does not use are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    #[serde(default = "teacher_section")]
    pub teacher: ModelSection,
    pub student: ModelSection,
    /// Seeds for ablation aggregates.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Ablation grids; the shipped suite when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grids: Option<Vec<crate::ablation::AblationGrid>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSection::default(),
            teacher: ModelSection::teacher(),
            student: ModelSection::student(),
            seeds: default_seeds(),
            grids: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
        Self::from_json(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.data.to_core()?;
        self.teacher.train.validate()?;
        if self.teacher.train.distill.is_some() {
            return Err(HarnessError::Config("teacher pretraining takes no distill section".into()));
        }
        self.student.train.validate()?;
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("seeds must not be empty".into()));
        }
        if let Some(grids) = &self.grids {
            for g in grids {
                g.expand(self)?;
            }
        }
        Ok(())
    }

    /// Reduced sizes for a single-core machine: smaller splits, a narrower
    /// teacher and fewer epochs, everything else as in the default.
    pub fn quick() -> Self {
        let mut c = ExperimentConfig::default();
        c.data.n_samples = 256;
        c.data.n_eval = 128;
        c.teacher.width = 16;
        c.teacher.depth = 2;
        c.teacher.train.epochs = 12;
        c.student.train.epochs = 8;
        c
    }
}
