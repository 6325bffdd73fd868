//! Teacher pretraining and student distillation loops.
//!
//! Every stochastic choice derives from the run seed: the student init from
//! `fork(INIT)`, the per-epoch sample order from `derive([ORDER, epoch])` and
//! the dropout masks of each sample from `derive([KD, epoch, step, j])`.

use std::time::Instant;

use uet_core::data::{self, DataConfig, Sample, CLASSES};
use uet_core::distill::DistillConfig;
use uet_core::model::FeaturePyramid;
use uet_core::optim::{cosine_lr, Optimizer};
use uet_core::train::{evaluate, student_sample_grads, teacher_sample_grads, Accuracy, KdTarget};
use uet_core::{Adapter, DetNet, Eager, Parametrized, PyramidSpec, Rng, Role};

use crate::config::{DataSection, ModelSize, TrainConfig};
use crate::error::{HarnessError, Result};
use crate::report::{EpochRecord, Status, StepRecord, TrainReport};

const INIT: u64 = 0x1417;
const ORDER: u64 = 0x0D3E;
const KD: u64 = 0x0CD0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Leaves out wall-clock time so reports compare byte for byte.
    pub deterministic: bool,
    /// Keeps per-step losses in the report.
    pub record_steps: bool,
}

/// Generated train and eval splits.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub cfg: DataConfig,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
    pub digest: String,
}

impl Dataset {
    pub fn generate(section: &DataSection) -> Result<Self> {
        let cfg = section.to_core()?;
        let (train, eval) = data::gen_split(&cfg)?;
        let digest = format!("{}/{}", data::digest(&train), data::digest(&eval));
        Ok(Dataset {
            cfg,
            train,
            eval,
            digest,
        })
    }

    pub fn spec(&self) -> PyramidSpec {
        PyramidSpec {
            scales: self.cfg.scales,
            channels: None,
            input: [1, self.cfg.image_size, self.cfg.image_size],
            num_classes: CLASSES,
        }
    }

    /// Accuracy of predicting background everywhere on the eval split.
    pub fn background_baseline(&self) -> Accuracy {
        let per_scale: Vec<f64> = (0..self.cfg.scales)
            .map(|s| data::class_frequencies(&self.eval, s)[data::BACKGROUND])
            .collect();
        let mean = per_scale.iter().sum::<f64>() / per_scale.len() as f64;
        Accuracy { per_scale, mean }
    }

    pub fn evaluate(&self, net: &DetNet) -> Result<Accuracy> {
        Ok(evaluate(net, self.eval.iter().map(|s| (&s.image, s.labels.as_slice())))?)
    }
}

/// A frozen teacher with its pyramid on every training image.
#[derive(Debug)]
pub struct TeacherBundle {
    pub net: DetNet,
    pub features: Vec<FeaturePyramid>,
}

impl TeacherBundle {
    pub fn new(mut net: DetNet, data: &Dataset) -> Result<Self> {
        net.freeze();
        let features = data
            .train
            .iter()
            .map(|s| net.forward_pyramid(&mut Eager, &s.image))
            .collect::<uet_core::Result<_>>()?;
        Ok(TeacherBundle { net, features })
    }

    pub fn digest(&self) -> String {
        self.net.digest()
    }
}

pub struct RunOutcome {
    pub net: DetNet,
    pub adapter: Option<Adapter>,
    pub report: TrainReport,
}

fn shuffled(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        order.swap(i, j);
    }
    order
}

struct Kd<'a> {
    teacher: &'a TeacherBundle,
    cfg: DistillConfig,
}

struct Fit {
    epochs: Vec<EpochRecord>,
    steps: Vec<StepRecord>,
    error: Option<String>,
}

fn fit(
    net: &mut DetNet,
    mut adapter: Option<&mut Adapter>,
    train: &TrainConfig,
    data: &Dataset,
    kd: Option<&Kd<'_>>,
    opts: RunOptions,
) -> Result<Fit> {
    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(train.batch_size);
    let total_steps = steps_per_epoch * train.epochs;
    let root = Rng::new(train.seed);
    let mut opt = Optimizer::new(train.optim());
    let mut out = Fit {
        epochs: Vec::with_capacity(train.epochs),
        steps: Vec::new(),
        error: None,
    };
    let mut global = 0;
    for epoch in 1..=train.epochs {
        let order = shuffled(n, &mut root.derive(&[ORDER, epoch as u64]));
        let (mut task_sum, mut kd_sum, mut degenerate) = (0.0, 0.0, 0);
        for (step, batch) in order.chunks(train.batch_size).enumerate() {
            net.zero_grads();
            if let Some(a) = adapter.as_deref_mut() {
                a.zero_grads();
            }
            let weight = 1.0 / batch.len() as f64;
            let (mut step_task, mut step_kd) = (0.0, 0.0);
            for (j, &i) in batch.iter().enumerate() {
                let s = &data.train[i];
                let r = match kd {
                    None if net.role == Role::Teacher => {
                        teacher_sample_grads(net, &s.image, &s.labels, weight).map(|task| (task, 0.0, 0))
                    }
                    None => student_sample_grads(net, None, &s.image, &s.labels, None, weight)
                        .map(|l| (l.task, 0.0, 0)),
                    Some(kd) => {
                        let rng = root.derive(&[KD, epoch as u64, step as u64, j as u64]);
                        let target = KdTarget {
                            teacher: &kd.teacher.net,
                            features: &kd.teacher.features[i],
                            cfg: &kd.cfg,
                            rng: &rng,
                            epoch,
                        };
                        student_sample_grads(net, adapter.as_deref_mut(), &s.image, &s.labels, Some(target), weight)
                            .map(|l| (l.task, l.kd, l.degenerate))
                    }
                };
                let (t, k, d) = match r {
                    Ok(v) => v,
                    Err(e @ uet_core::Error::NonFinite { .. }) => {
                        out.error = Some(format!("epoch {epoch}, step {step}: {e}"));
                        return Ok(out);
                    }
                    Err(e) => return Err(e.into()),
                };
                step_task += t;
                step_kd += k;
                degenerate += d;
            }
            let lr = cosine_lr(train.lr, global, total_steps);
            let mut params = net.params_mut();
            if let Some(a) = adapter.as_deref_mut() {
                params.extend(a.params_mut());
            }
            if let Err(e) = opt.step(&mut params, lr) {
                out.error = Some(format!("epoch {epoch}, step {step}: {e}"));
                return Ok(out);
            }
            global += 1;
            task_sum += step_task;
            kd_sum += step_kd;
            if opts.record_steps {
                out.steps.push(StepRecord {
                    epoch,
                    step,
                    task_loss: step_task * weight,
                    kd_loss: step_kd * weight,
                });
            }
        }
        let acc = data.evaluate(net)?;
        out.epochs.push(EpochRecord {
            epoch,
            task_loss: task_sum / n as f64,
            kd_loss: kd_sum / n as f64,
            eval_accuracy: acc.per_scale,
            eval_accuracy_mean: acc.mean,
            ratios_used: kd.map(|k| if k.cfg.is_uet() { k.cfg.ratios(epoch) } else { Vec::new() }).unwrap_or_default(),
            degenerate_channels: degenerate,
        });
    }
    Ok(out)
}

fn assemble(
    label: String,
    net: &DetNet,
    train: &TrainConfig,
    data: &Dataset,
    fit: Fit,
    teacher_digests: Option<(String, String)>,
    started: Instant,
    opts: RunOptions,
) -> TrainReport {
    let (final_accuracy, final_accuracy_mean) = fit
        .epochs
        .last()
        .map(|e| (e.eval_accuracy.clone(), e.eval_accuracy_mean))
        .unwrap_or((Vec::new(), 0.0));
    let (before, after) = teacher_digests.unzip();
    TrainReport {
        label,
        role: net.role.as_str().into(),
        status: if fit.error.is_some() { Status::Failed } else { Status::Ok },
        error: fit.error,
        width: net.width,
        depth: net.depth,
        config: train.clone(),
        data_digest: data.digest.clone(),
        epochs: fit.epochs,
        final_accuracy,
        final_accuracy_mean,
        param_digest: net.digest(),
        teacher_param_digest_before: before,
        teacher_param_digest_after: after,
        steps: opts.record_steps.then_some(fit.steps),
        wall_time_secs: (!opts.deterministic).then(|| started.elapsed().as_secs_f64()),
    }
}

/// Supervised pretraining of the teacher. The returned network is frozen.
pub fn train_teacher(size: ModelSize, train: &TrainConfig, data: &Dataset, opts: RunOptions) -> Result<RunOutcome> {
    train.validate()?;
    if train.distill.is_some() {
        return Err(HarnessError::Config("teacher pretraining takes no distill section".into()));
    }
    let started = Instant::now();
    let mut rng = Rng::new(train.seed).fork(INIT);
    let mut net = DetNet::build(data.spec(), size.width, size.depth, Role::Teacher, &mut rng)?;
    net.set_trainable(true);
    let fit = fit(&mut net, None, train, data, None, opts)?;
    net.freeze();
    let report = assemble("teacher".into(), &net, train, data, fit, None, started, opts);
    Ok(RunOutcome {
        net,
        adapter: None,
        report,
    })
}

/// Trains a student with the distill section of `train`, or from scratch
/// when it is absent. The teacher is only read.
pub fn distill_student(
    size: ModelSize,
    train: &TrainConfig,
    teacher: &TeacherBundle,
    data: &Dataset,
    opts: RunOptions,
) -> Result<RunOutcome> {
    train.validate()?;
    let spec = data.spec();
    let t = &teacher.net.spec;
    if (t.scales, t.input, t.num_classes) != (spec.scales, spec.input, spec.num_classes) {
        return Err(HarnessError::Config(format!(
            "teacher pyramid {t:?} is incompatible with the student task {spec:?}"
        )));
    }
    if teacher.features.len() != data.train.len() {
        return Err(HarnessError::Config("teacher features do not match the training split".into()));
    }
    let started = Instant::now();
    let before = teacher.digest();
    let mut rng = Rng::new(train.seed).fork(INIT);
    let mut net = DetNet::build(spec, size.width, size.depth, Role::Student, &mut rng)?;
    let cfg = train.distill.as_ref().map(|d| d.to_core()).transpose()?;
    let (fit, adapter, label) = match cfg {
        None => {
            let fit = fit(&mut net, None, train, data, None, opts)?;
            (fit, None, "scratch".to_string())
        }
        Some(cfg) => {
            let mut adapter = if cfg.logits_mode {
                None
            } else {
                Some(Adapter::between(&teacher.net, &net, &mut rng)?)
            };
            let label = cfg.label();
            let kd = Kd { teacher, cfg };
            let fit = fit(&mut net, adapter.as_mut(), train, data, Some(&kd), opts)?;
            (fit, adapter, label)
        }
    };
    let after = teacher.digest();
    let report = assemble(label, &net, train, data, fit, Some((before, after)), started, opts);
    Ok(RunOutcome { net, adapter, report })
}

