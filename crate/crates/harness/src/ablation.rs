//! Ablation grids: Cartesian expansion, execution over seeds and aggregation.
//!
//! Cells that expand to the same (student size, distill config) pair are run
//! once per seed and shared between grids; every grid still reports its own
//! rows.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{
    DistanceName, DistillSection, ExperimentConfig, ExtractionName, ModelSize, ScheduleConfig, SourceName,
    StrategyName,
};
use crate::error::{HarnessError, Result};
use crate::report::{finish, write_text, Status};
use crate::runner::{distill_student, Dataset, RunOptions, TeacherBundle};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeName {
    Full,
    Half,
}

/// Student size: relative to the configured student, or explicit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StudentSize {
    Named(SizeName),
    Explicit(ModelSize),
}

impl StudentSize {
    pub fn resolve(self, base: ModelSize) -> ModelSize {
        match self {
            StudentSize::Named(SizeName::Full) => base,
            StudentSize::Named(SizeName::Half) => base.half(),
            StudentSize::Explicit(s) => s,
        }
    }
}

/// One explicitly listed cell; `distill` absent means training from scratch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    #[serde(default = "full")]
    pub student: StudentSize,
    #[serde(default)]
    pub distill: Option<DistillSection>,
}

fn full() -> StudentSize {
    StudentSize::Named(SizeName::Full)
}

/// Axis lists over the student distill section. An empty list keeps the
/// configured value; `cells`, when present, replaces the product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub name: String,
    #[serde(rename = "N")]
    pub n: Vec<usize>,
    pub strategy: Vec<StrategyName>,
    pub source: Vec<SourceName>,
    pub residual: Vec<bool>,
    pub extraction: Vec<ExtractionName>,
    pub distance: Vec<DistanceName>,
    pub logits_mode: Vec<bool>,
    pub student: Vec<StudentSize>,
    /// Adds a from-scratch cell per student size.
    pub scratch: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cells: Option<Vec<CellSpec>>,
    /// Overrides the experiment seeds for this grid.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            name: "grid".into(),
            n: Vec::new(),
            strategy: Vec::new(),
            source: Vec::new(),
            residual: Vec::new(),
            extraction: Vec::new(),
            distance: Vec::new(),
            logits_mode: Vec::new(),
            student: Vec::new(),
            scratch: false,
            cells: None,
            seeds: None,
        }
    }
}

/// A fully resolved grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub label: String,
    pub student: ModelSize,
    pub distill: Option<DistillSection>,
}

impl Cell {
    fn key(&self) -> String {
        serde_json::to_string(&(self.student, &self.distill)).expect("cells serialize")
    }
}

fn axis<T: Copy>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

/// Canonical form: plain ET drops the uncertainty fields, logits mode drops
/// the feature extraction and distance.
fn normalize(mut d: DistillSection) -> DistillSection {
    let defaults = DistillSection::default();
    if d.n == 0 || d.source == SourceName::None {
        d.n = 0;
        d.source = SourceName::None;
        d.residual = false;
        d.halve_residual = false;
        d.schedule = ScheduleConfig::default();
    }
    if d.logits_mode {
        d.extraction = defaults.extraction;
        d.distance = defaults.distance;
    } else {
        d.temperature = defaults.temperature;
    }
    d.schedule.n = None;
    d
}

fn make_cell(student: ModelSize, distill: Option<DistillSection>) -> Result<Cell> {
    let distill = distill.map(normalize);
    let label = match &distill {
        None => "scratch".to_string(),
        Some(d) => d.to_core()?.label(),
    };
    Ok(Cell { label, student, distill })
}

impl AblationGrid {
    pub fn seeds<'a>(&'a self, exp: &'a ExperimentConfig) -> &'a [u64] {
        self.seeds.as_deref().unwrap_or(&exp.seeds)
    }

    /// Distinct cells in expansion order.
    pub fn expand(&self, exp: &ExperimentConfig) -> Result<Vec<Cell>> {
        if self.seeds.as_ref().is_some_and(Vec::is_empty) {
            return Err(HarnessError::Config(format!("grid {}: seeds must not be empty", self.name)));
        }
        let base_size = exp.student.size();
        let base = exp.student.train.distill.clone().unwrap_or_default();
        let mut cells = Vec::new();
        if let Some(specs) = &self.cells {
            for c in specs {
                cells.push(make_cell(c.student.resolve(base_size), c.distill.clone())?);
            }
        } else {
            for size in axis(&self.student, full()) {
                let size = size.resolve(base_size);
                if self.scratch {
                    cells.push(make_cell(size, None)?);
                }
                for &n in &axis(&self.n, base.n) {
                    for &strategy in &axis(&self.strategy, base.schedule.strategy) {
                        for &source in &axis(&self.source, base.source) {
                            for &residual in &axis(&self.residual, base.residual) {
                                for &logits_mode in &axis(&self.logits_mode, base.logits_mode) {
                                    for &extraction in &axis(&self.extraction, base.extraction) {
                                        for &distance in &axis(&self.distance, base.distance) {
                                            let mut d = base.clone();
                                            d.n = n;
                                            d.schedule.strategy = strategy;
                                            d.source = source;
                                            d.residual = residual;
                                            d.logits_mode = logits_mode;
                                            d.extraction = extraction;
                                            d.distance = distance;
                                            let cell = make_cell(size, Some(d)).map_err(|e| {
                                                HarnessError::Config(format!("grid {}: {e}", self.name))
                                            })?;
                                            cells.push(cell);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut seen = std::collections::HashSet::new();
        cells.retain(|c| seen.insert(c.key()));
        if cells.is_empty() {
            return Err(HarnessError::Config(format!("grid {} has no cells", self.name)));
        }
        Ok(cells)
    }
}

fn teacher_source(residual: bool) -> DistillSection {
    DistillSection {
        source: SourceName::Teacher,
        residual,
        ..DistillSection::default()
    }
}

/// The shipped suite.
pub fn default_grids() -> Vec<AblationGrid> {
    let d = DistillSection::default();
    let with_source = |source, residual| CellSpec {
        student: full(),
        distill: Some(DistillSection {
            source,
            residual,
            ..d.clone()
        }),
    };
    vec![
        AblationGrid {
            name: "n-sweep".into(),
            n: vec![0, 1, 5, 10, 15],
            ..AblationGrid::default()
        },
        AblationGrid {
            name: "strategy".into(),
            strategy: vec![StrategyName::A, StrategyName::B, StrategyName::C],
            ..AblationGrid::default()
        },
        AblationGrid {
            name: "knowledge-source".into(),
            cells: Some(vec![
                with_source(SourceName::None, false),
                with_source(SourceName::Student, true),
                CellSpec {
                    student: full(),
                    distill: Some(teacher_source(true)),
                },
                CellSpec {
                    student: full(),
                    distill: Some(teacher_source(false)),
                },
                with_source(SourceName::Both, true),
            ]),
            ..AblationGrid::default()
        },
        AblationGrid {
            name: "extraction-distance".into(),
            n: vec![0, 5],
            logits_mode: vec![false, true],
            extraction: vec![ExtractionName::Identity, ExtractionName::PearsonNorm, ExtractionName::Attention],
            distance: vec![DistanceName::L2, DistanceName::Pearson, DistanceName::Ssim],
            ..AblationGrid::default()
        },
        AblationGrid {
            name: "capacity".into(),
            student: vec![StudentSize::Named(SizeName::Full), StudentSize::Named(SizeName::Half)],
            scratch: true,
            n: vec![5],
            source: vec![SourceName::None, SourceName::Teacher],
            ..AblationGrid::default()
        },
    ]
}

/// One (grid, cell, seed) result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub grid: String,
    pub label: String,
    pub width: usize,
    pub depth: usize,
    pub distill: Option<DistillSection>,
    pub seed: u64,
    pub status: Status,
    pub error: Option<String>,
    pub final_accuracy: Vec<f64>,
    pub final_accuracy_mean: f64,
    pub teacher_unchanged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub grid: String,
    pub label: String,
    pub width: usize,
    pub depth: usize,
    pub seeds: usize,
    pub failed: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
}

/// Mean and std of a paired difference over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub teacher_digest: String,
    pub teacher_unchanged: bool,
    pub cells: usize,
    pub runs: usize,
    /// UET default minus ET baseline, full-size student.
    pub uet_minus_et: Option<Delta>,
    /// Better of ET and UET default minus scratch, full-size student.
    pub distilled_minus_scratch: Option<Delta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub rows: Vec<Row>,
    pub aggregates: Vec<Aggregate>,
    pub summary: Summary,
}

/// Mean and sample standard deviation; the std of one value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Cartesian sizes of each grid, for reporting before a run.
pub fn plan(exp: &ExperimentConfig, grids: &[AblationGrid]) -> Result<Vec<(String, usize, usize)>> {
    grids
        .iter()
        .map(|g| Ok((g.name.clone(), g.expand(exp)?.len(), g.seeds(exp).len())))
        .collect()
}

type RunKey = (String, u64);

pub fn run_ablation(
    exp: &ExperimentConfig,
    grids: &[AblationGrid],
    teacher: &TeacherBundle,
    data: &Dataset,
    opts: RunOptions,
    jobs: usize,
) -> Result<AblationResult> {
    let expanded: Vec<(&AblationGrid, Vec<Cell>)> =
        grids.iter().map(|g| Ok((g, g.expand(exp)?))).collect::<Result<_>>()?;
    let mut unique: Vec<(RunKey, Cell)> = Vec::new();
    let mut index: HashMap<RunKey, usize> = HashMap::new();
    for (g, cells) in &expanded {
        for c in cells {
            for &seed in g.seeds(exp) {
                let key = (c.key(), seed);
                if !index.contains_key(&key) {
                    index.insert(key.clone(), unique.len());
                    unique.push((key, c.clone()));
                }
            }
        }
    }
    let run = |(key, cell): &(RunKey, Cell)| -> Row {
        let mut train = exp.student.train.clone();
        train.seed = key.1;
        train.distill = cell.distill.clone();
        let base = Row {
            grid: String::new(),
            label: cell.label.clone(),
            width: cell.student.width,
            depth: cell.student.depth,
            distill: cell.distill.clone(),
            seed: key.1,
            status: Status::Failed,
            error: None,
            final_accuracy: Vec::new(),
            final_accuracy_mean: f64::NAN,
            teacher_unchanged: true,
        };
        match distill_student(cell.student, &train, teacher, data, opts) {
            Ok(out) => Row {
                status: out.report.status,
                error: out.report.error.clone(),
                final_accuracy_mean: if out.report.status == Status::Ok {
                    out.report.final_accuracy_mean
                } else {
                    f64::NAN
                },
                final_accuracy: out.report.final_accuracy.clone(),
                teacher_unchanged: out.report.teacher_unchanged(),
                ..base
            },
            Err(e) => Row {
                error: Some(e.to_string()),
                ..base
            },
        }
    };
    let threads = if opts.deterministic { 1 } else { jobs.max(1) };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let results: Vec<Row> = pool.install(|| unique.par_iter().map(run).collect());

    let mut rows = Vec::new();
    let mut aggregates = Vec::new();
    for (g, cells) in &expanded {
        for c in cells {
            let mut accs = Vec::new();
            let mut failed = 0;
            for &seed in g.seeds(exp) {
                let r = &results[index[&(c.key(), seed)]];
                if r.status == Status::Ok {
                    accs.push(r.final_accuracy_mean);
                } else {
                    failed += 1;
                }
                rows.push(Row {
                    grid: g.name.clone(),
                    ..r.clone()
                });
            }
            let (mean, std) = mean_std(&accs);
            aggregates.push(Aggregate {
                grid: g.name.clone(),
                label: c.label.clone(),
                width: c.student.width,
                depth: c.student.depth,
                seeds: g.seeds(exp).len(),
                failed,
                accuracy_mean: mean,
                accuracy_std: std,
            });
        }
    }

    let full = exp.student.size();
    let by_seed = |distill: Option<DistillSection>| -> HashMap<u64, f64> {
        let cell = make_cell(full, distill).expect("shipped configs are valid");
        let key = cell.key();
        unique
            .iter()
            .zip(&results)
            .filter(|((k, _), r)| k.0 == key && r.status == Status::Ok)
            .map(|((k, _), r)| (k.1, r.final_accuracy_mean))
            .collect()
    };
    let paired = |a: &HashMap<u64, f64>, b: &HashMap<u64, f64>| -> Option<Delta> {
        let mut seeds: Vec<_> = a.keys().filter(|s| b.contains_key(s)).copied().collect();
        seeds.sort_unstable();
        let diffs: Vec<f64> = seeds.iter().map(|s| a[s] - b[s]).collect();
        (!diffs.is_empty()).then(|| {
            let (mean, std) = mean_std(&diffs);
            Delta {
                mean,
                std,
                seeds: diffs.len(),
            }
        })
    };
    let uet = by_seed(Some(DistillSection::default()));
    let et = by_seed(Some(crate::config::et_section()));
    let scratch = by_seed(None);
    let best: HashMap<u64, f64> = {
        let (m_uet, m_et) = (
            mean_std(&uet.values().copied().collect::<Vec<_>>()).0,
            mean_std(&et.values().copied().collect::<Vec<_>>()).0,
        );
        if uet.is_empty() || (!et.is_empty() && m_et > m_uet) {
            et.clone()
        } else {
            uet.clone()
        }
    };
    let summary = Summary {
        teacher_digest: teacher.digest(),
        teacher_unchanged: rows.iter().all(|r| r.teacher_unchanged),
        cells: unique.iter().map(|(k, _)| &k.0).collect::<std::collections::HashSet<_>>().len(),
        runs: unique.len(),
        uet_minus_et: paired(&uet, &et),
        distilled_minus_scratch: paired(&best, &scratch),
    };
    Ok(AblationResult {
        rows,
        aggregates,
        summary,
    })
}

fn opt_str<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

pub fn rows_csv(rows: &[Row]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "grid",
        "label",
        "width",
        "depth",
        "N",
        "strategy",
        "source",
        "residual",
        "extraction",
        "distance",
        "logits_mode",
        "seed",
        "status",
        "final_accuracy_mean",
        "final_accuracy_per_scale",
        "teacher_unchanged",
        "error",
    ])?;
    for r in rows {
        let d = r.distill.as_ref();
        w.write_record([
            r.grid.clone(),
            r.label.clone(),
            r.width.to_string(),
            r.depth.to_string(),
            opt_str(d.map(|d| d.n)),
            opt_str(d.filter(|d| d.n > 0).map(|d| name(&d.schedule.strategy))),
            opt_str(d.map(|d| name(&d.source))),
            opt_str(d.map(|d| d.residual)),
            opt_str(d.filter(|d| !d.logits_mode).map(|d| name(&d.extraction))),
            opt_str(d.filter(|d| !d.logits_mode).map(|d| name(&d.distance))),
            opt_str(d.map(|d| d.logits_mode)),
            r.seed.to_string(),
            name(&r.status),
            r.final_accuracy_mean.to_string(),
            r.final_accuracy.iter().map(f64::to_string).collect::<Vec<_>>().join(" "),
            r.teacher_unchanged.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    finish(w)
}

pub fn aggregates_csv(aggs: &[Aggregate]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["grid", "label", "width", "depth", "seeds", "failed", "accuracy_mean", "accuracy_std"])?;
    for a in aggs {
        w.write_record([
            a.grid.clone(),
            a.label.clone(),
            a.width.to_string(),
            a.depth.to_string(),
            a.seeds.to_string(),
            a.failed.to_string(),
            a.accuracy_mean.to_string(),
            a.accuracy_std.to_string(),
        ])?;
    }
    finish(w)
}

/// Writes `rows.csv`, `aggregates.csv` and `ablation.json` into `dir`.
pub fn write_outputs(result: &AblationResult, dir: &Path) -> Result<()> {
    write_text(&dir.join("rows.csv"), &rows_csv(&result.rows)?)?;
    write_text(&dir.join("aggregates.csv"), &aggregates_csv(&result.aggregates)?)?;
    write_text(&dir.join("ablation.json"), &(serde_json::to_string_pretty(result)? + "\n"))
}
