//! Training reports and their JSON/CSV renderings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample task loss over the epoch.
    pub task_loss: f64,
    /// Mean per-sample distillation loss (0 without a distill section).
    pub kd_loss: f64,
    pub eval_accuracy: Vec<f64>,
    pub eval_accuracy_mean: f64,
    /// Dropout ratios the schedule produced for this epoch.
    pub ratios_used: Vec<f64>,
    /// Flat-channel pearson cases encountered during the epoch.
    pub degenerate_channels: usize,
}

/// Losses of one optimizer step, recorded on request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub task_loss: f64,
    pub kd_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub label: String,
    pub role: String,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub width: usize,
    pub depth: usize,
    pub config: TrainConfig,
    pub data_digest: String,
    pub epochs: Vec<EpochRecord>,
    pub final_accuracy: Vec<f64>,
    pub final_accuracy_mean: f64,
    pub param_digest: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_param_digest_before: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_param_digest_after: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<Vec<StepRecord>>,
    /// Omitted in deterministic mode so reports compare byte for byte.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_secs: Option<f64>,
}

impl TrainReport {
    pub fn teacher_unchanged(&self) -> bool {
        self.teacher_param_digest_before == self.teacher_param_digest_after
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_text(path, &(self.to_json()? + "\n"))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    }
    std::fs::write(path, text).map_err(HarnessError::io(path))
}

/// Per-epoch CSV of one report.
pub fn epochs_csv(report: &TrainReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let scales = report.epochs.first().map_or(report.final_accuracy.len(), |e| e.eval_accuracy.len());
    let mut header = vec!["epoch".to_string(), "task_loss".into(), "kd_loss".into()];
    header.extend((0..scales).map(|s| format!("eval_accuracy_s{s}")));
    header.extend(["eval_accuracy_mean".into(), "ratios_used".into(), "degenerate_channels".into()]);
    w.write_record(&header)?;
    for e in &report.epochs {
        let mut row = vec![e.epoch.to_string(), e.task_loss.to_string(), e.kd_loss.to_string()];
        row.extend(e.eval_accuracy.iter().map(f64::to_string));
        row.push(e.eval_accuracy_mean.to_string());
        row.push(e.ratios_used.iter().map(f64::to_string).collect::<Vec<_>>().join(" "));
        row.push(e.degenerate_channels.to_string());
        w.write_record(&row)?;
    }
    finish(w)
}

pub(crate) fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| HarnessError::Config(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| HarnessError::Config(e.to_string()))
}

/// Eval-accuracy curves side by side: one row per epoch, one column per run.
pub fn emit_convergence(reports: &[TrainReport]) -> Result<String> {
    let Some(first) = reports.first() else {
        return Err(HarnessError::Config("no reports to align".into()));
    };
    let n = first.epochs.len();
    if let Some(r) = reports.iter().find(|r| r.epochs.len() != n) {
        return Err(HarnessError::Config(format!(
            "epoch counts differ: {} has {}, {} has {n}",
            r.label,
            r.epochs.len(),
            first.label
        )));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["epoch".to_string()];
    header.extend(reports.iter().map(|r| r.label.clone()));
    w.write_record(&header)?;
    for i in 0..n {
        let mut row = vec![first.epochs[i].epoch.to_string()];
        row.extend(reports.iter().map(|r| r.epochs[i].eval_accuracy_mean.to_string()));
        w.write_record(&row)?;
    }
    finish(w)
}
