use std::process::Command;

use uet_core::data::{class_frequencies, BACKGROUND};
use uet_core::{DetNet, Parametrized, PyramidSpec, Rng, Role};
use uet_harness::ablation::{run_ablation, AblationGrid};
use uet_harness::config::{et_section, DataSection, DistillSection, ExperimentConfig, ModelSize, TrainConfig};
use uet_harness::report::Status;
use uet_harness::runner::{distill_student, train_teacher, Dataset, RunOptions, TeacherBundle};
use uet_harness::HarnessError;

const DET: RunOptions = RunOptions {
    deterministic: true,
    record_steps: false,
};

fn tiny_data() -> Dataset {
    Dataset::generate(&DataSection {
        n_samples: 16,
        n_eval: 8,
        ..DataSection::default()
    })
    .unwrap()
}

fn train(epochs: usize, distill: Option<DistillSection>) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        distill,
        ..TrainConfig::default()
    }
}

fn teacher(data: &Dataset) -> TeacherBundle {
    let run = train_teacher(ModelSize { width: 8, depth: 1 }, &train(2, None), data, DET).unwrap();
    assert_eq!(run.report.status, Status::Ok);
    TeacherBundle::new(run.net, data).unwrap()
}

#[test]
fn zero_weight_student_predicts_background_everywhere() {
    let data = tiny_data();
    let mut net = DetNet::build(data.spec(), 8, 2, Role::Student, &mut Rng::new(0)).unwrap();
    for p in net.params_mut() {
        p.data_mut().fill(0.0);
    }
    let acc = data.evaluate(&net).unwrap();
    for s in 0..3 {
        let freq = class_frequencies(&data.eval, s)[BACKGROUND];
        assert!((acc.per_scale[s] - freq).abs() < 1e-12, "scale {s}: {} vs {freq}", acc.per_scale[s]);
    }
    assert!((acc.mean - data.background_baseline().mean).abs() < 1e-12);
}

#[test]
fn evaluate_is_idempotent() {
    let data = tiny_data();
    let net = DetNet::build(data.spec(), 8, 1, Role::Student, &mut Rng::new(3)).unwrap();
    assert_eq!(data.evaluate(&net).unwrap(), data.evaluate(&net).unwrap());
}

#[test]
fn teacher_training_is_deterministic_and_frozen() {
    let data = tiny_data();
    let size = ModelSize { width: 8, depth: 1 };
    let a = train_teacher(size, &train(2, None), &data, DET).unwrap();
    let b = train_teacher(size, &train(2, None), &data, DET).unwrap();
    assert_eq!(a.report.to_json().unwrap(), b.report.to_json().unwrap());
    assert_eq!(a.net.digest(), b.net.digest());
    assert_eq!(a.net.role, Role::Teacher);
    assert!(a.net.params().iter().all(|p| !p.requires_grad()));
    assert_eq!(a.report.epochs.len(), 2);
}

#[test]
fn distillation_leaves_the_teacher_untouched() {
    let data = tiny_data();
    let t = teacher(&data);
    let before = t.digest();
    for distill in [None, Some(et_section()), Some(DistillSection::default())] {
        let out = distill_student(ModelSize::STUDENT, &train(2, distill), &t, &data, DET).unwrap();
        assert_eq!(out.report.status, Status::Ok);
        assert!(out.report.teacher_unchanged());
        assert_eq!(out.report.teacher_param_digest_before.as_deref(), Some(before.as_str()));
        assert_eq!(out.report.epochs.len(), 2);
    }
    assert_eq!(t.digest(), before);
}

#[test]
fn run_labels_follow_the_config() {
    let data = tiny_data();
    let t = teacher(&data);
    let et = distill_student(ModelSize::STUDENT, &train(1, Some(et_section())), &t, &data, DET).unwrap();
    assert_eq!(et.report.label, "ET baseline");
    assert!(et.report.epochs[0].ratios_used.is_empty());
    let uet = distill_student(ModelSize::STUDENT, &train(1, Some(DistillSection::default())), &t, &data, DET).unwrap();
    assert_eq!(uet.report.label, "UET default");
    assert_eq!(uet.report.epochs[0].ratios_used, vec![0.05, 0.1, 0.15, 0.2, 0.25]);
}

#[test]
fn logits_mode_trains_without_an_adapter() {
    let data = tiny_data();
    let t = teacher(&data);
    let d = DistillSection {
        logits_mode: true,
        ..DistillSection::default()
    };
    let out = distill_student(ModelSize::STUDENT, &train(1, Some(d)), &t, &data, DET).unwrap();
    assert_eq!(out.report.status, Status::Ok);
    assert!(out.adapter.is_none());
    assert!(out.report.epochs[0].kd_loss > 0.0);
}

#[test]
fn incompatible_teacher_is_rejected_before_training() {
    let data = tiny_data();
    let spec = PyramidSpec {
        scales: 2,
        ..data.spec()
    };
    let net = DetNet::build(spec, 8, 1, Role::Teacher, &mut Rng::new(0)).unwrap();
    let t = TeacherBundle::new(net, &data).unwrap();
    let e = distill_student(ModelSize::STUDENT, &train(1, Some(et_section())), &t, &data, DET)
        .err()
        .expect("rejected");
    assert!(matches!(e, HarnessError::Config(_)), "{e}");
}

#[test]
fn divergence_produces_a_failed_report() {
    let data = tiny_data();
    let cfg = TrainConfig {
        lr: 1e12,
        max_grad_norm: None,
        ..train(3, None)
    };
    let out = train_teacher(ModelSize { width: 8, depth: 1 }, &cfg, &data, DET).unwrap();
    assert_eq!(out.report.status, Status::Failed);
    assert!(out.report.error.is_some());
    assert!(out.report.epochs.len() < 3);
}

#[test]
fn ablation_rows_cover_cells_times_seeds() {
    let data = tiny_data();
    let t = teacher(&data);
    let mut exp = ExperimentConfig::default();
    exp.student.train = train(1, Some(DistillSection::default()));
    exp.seeds = vec![7];
    let grids = vec![
        AblationGrid {
            name: "n".into(),
            n: vec![0, 1, 5],
            ..AblationGrid::default()
        },
        AblationGrid {
            name: "seeds".into(),
            n: vec![0, 5],
            scratch: true,
            seeds: Some(vec![7, 8]),
            ..AblationGrid::default()
        },
    ];
    let r = run_ablation(&exp, &grids, &t, &data, DET, 1).unwrap();
    assert_eq!(r.rows.len(), 3 + 3 * 2);
    assert_eq!(r.aggregates.len(), 3 + 3);
    // shared cells run once per seed: N in {0, 1, 5} and scratch, seed 7, plus 3 cells at seed 8
    assert_eq!(r.summary.runs, 4 + 3);
    assert!(r.summary.teacher_unchanged);
    assert!(r.aggregates.iter().filter(|a| a.grid == "n").all(|a| a.accuracy_std == 0.0));
    assert!(r.summary.uet_minus_et.is_some());
    assert!(r.summary.distilled_minus_scratch.is_some());
}

#[test]
fn ablation_is_independent_of_worker_count() {
    let data = tiny_data();
    let t = teacher(&data);
    let mut exp = ExperimentConfig::default();
    exp.student.train = train(1, Some(DistillSection::default()));
    exp.seeds = vec![1, 2];
    let grids = vec![AblationGrid {
        name: "n".into(),
        n: vec![0, 5],
        ..AblationGrid::default()
    }];
    let fast = RunOptions {
        deterministic: false,
        record_steps: false,
    };
    let one = run_ablation(&exp, &grids, &t, &data, fast, 1).unwrap();
    let three = run_ablation(&exp, &grids, &t, &data, fast, 3).unwrap();
    assert_eq!(one, three);
}

fn uet() -> Command {
    Command::new(env!("CARGO_BIN_EXE_uet"))
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"student": {"train": {"learning_rate": 1}}}"#).unwrap();
    let out = uet().args(["--config", bad.to_str().unwrap(), "gen-data"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = uet().arg("no-such-command").output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    let diverge = dir.path().join("diverge.json");
    std::fs::write(
        &diverge,
        r#"{"data": {"n_samples": 8, "n_eval": 4},
            "teacher": {"width": 4, "depth": 1, "train": {"epochs": 3, "batch_size": 2, "lr": 1e200, "max_grad_norm": null}}}"#,
    )
    .unwrap();
    let out = uet()
        .args(["--config", diverge.to_str().unwrap(), "--out"])
        .arg(dir.path().join("t"))
        .arg("train-teacher")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(dir.path().join("t/teacher_report.json")).unwrap();
    assert!(report.contains("\"status\": \"failed\""));
}

#[test]
fn cli_gen_data_writes_a_container() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"data": {"n_samples": 4, "n_eval": 2}}"#).unwrap();
    let out = uet()
        .args(["--config", cfg.to_str().unwrap(), "--out"])
        .arg(dir.path())
        .arg("gen-data")
        .output()
        .unwrap();
    assert!(out.status.success());
    let c = uet_harness::checkpoint::Container::read(&dir.path().join("dataset.uett")).unwrap();
    // one image and three label maps per sample
    assert_eq!(c.tensors.len(), 6 * 4);
    assert_eq!(c.manifest["kind"], "dataset");
}
