use std::collections::BTreeSet;

use uet_core::{Adapter, DetNet, Parametrized, PyramidSpec, Rng, Role, Tensor};
use uet_harness::ablation::{default_grids, mean_std, AblationGrid};
use uet_harness::checkpoint::{load_net, save_net, Container};
use uet_harness::config::{ExperimentConfig, StrategyName};
use uet_harness::report::{emit_convergence, EpochRecord, Status, TrainReport};
use uet_harness::HarnessError;

fn spec() -> PyramidSpec {
    PyramidSpec {
        scales: 3,
        channels: None,
        input: [1, 32, 32],
        num_classes: 4,
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    let mut rng = Rng::new(5);
    let net = DetNet::build(spec(), 8, 2, Role::Student, &mut rng).unwrap();
    let adapter = Adapter::new(8, 16, 3, &mut rng);
    save_net(&path, &net, Some(&adapter)).unwrap();
    let (back, back_adapter) = load_net(&path).unwrap();
    assert_eq!(back.digest(), net.digest());
    assert_eq!(back_adapter.unwrap().digest(), adapter.digest());
    for (a, b) in back.params().iter().zip(net.params()) {
        assert!(a.bit_eq(b));
    }
}

#[test]
fn teacher_checkpoint_loads_frozen() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    let net = DetNet::build(spec(), 8, 1, Role::Teacher, &mut Rng::new(1)).unwrap();
    save_net(&path, &net, None).unwrap();
    let (back, adapter) = load_net(&path).unwrap();
    assert_eq!(back.role, Role::Teacher);
    assert!(adapter.is_none());
    assert!(back.params().iter().all(|p| !p.requires_grad()));
}

#[test]
fn container_rejects_corruption() {
    let c = Container {
        manifest: serde_json::json!({"kind": "test"}),
        tensors: vec![("x".into(), Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())],
    };
    let bytes = c.to_bytes().unwrap();
    assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
    assert!(Container::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Container::from_bytes(&bad).is_err());
    let mut long = bytes;
    long.push(0);
    assert!(Container::from_bytes(&long).is_err());
}

#[test]
fn tampered_parameters_fail_the_digest_check() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    let net = DetNet::build(spec(), 4, 1, Role::Teacher, &mut Rng::new(2)).unwrap();
    save_net(&path, &net, None).unwrap();
    let mut c = Container::read(&path).unwrap();
    c.tensors[0].1.data_mut()[0] += 1.0;
    c.write(&path).unwrap();
    assert!(matches!(load_net(&path), Err(HarnessError::Format { .. })));
}

#[test]
fn empty_config_is_the_default() {
    let cfg = ExperimentConfig::from_json("{}").unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
    assert_eq!(cfg.teacher.width, 32);
    assert_eq!(cfg.teacher.train.epochs, 30);
    assert_eq!(cfg.student.train.epochs, 20);
    assert_eq!(cfg.seeds, vec![0, 1, 2, 3, 4]);
}

#[test]
fn config_errors_map_to_exit_code_one() {
    for text in [
        r#"{"bogus": 1}"#,
        r#"{"student": {"train": {"distill": {"N": 5, "typo": true}}}}"#,
        r#"{"student": {"train": {"lr": 0}}}"#,
        r#"{"student": {"train": {"epochs": 0}}}"#,
        r#"{"student": {"train": {"distill": {"N": 0, "source": "teacher"}}}}"#,
        r#"{"student": {"train": {"distill": {"N": 5, "schedule": {"N": 4}}}}}"#,
        r#"{"teacher": {"train": {"distill": {}}}}"#,
        r#"{"data": {"label_noise_rate": 0.5}}"#,
        r#"{"seeds": []}"#,
    ] {
        let e = ExperimentConfig::from_json(text).unwrap_err();
        assert_eq!(e.exit_code(), 1, "{text}: {e}");
    }
    assert_eq!(HarnessError::Numerical("nan".into()).exit_code(), 2);
}

#[test]
fn strategy_names_accept_letters() {
    let cfg = ExperimentConfig::from_json(r#"{"student": {"train": {"distill": {"schedule": {"strategy": "C"}}}}}"#).unwrap();
    let d = cfg.student.train.distill.unwrap();
    assert_eq!(d.schedule.strategy, StrategyName::C);
    let text = serde_json::to_string(&d).unwrap();
    assert!(text.contains("\"C-epoch-growing\""));
}

#[test]
fn config_round_trips_through_json() {
    let mut cfg = ExperimentConfig::quick();
    cfg.grids = Some(default_grids());
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
}

#[test]
fn shipped_grid_cardinalities() {
    let cfg = ExperimentConfig::default();
    let sizes: Vec<(String, usize)> = default_grids()
        .iter()
        .map(|g| (g.name.clone(), g.expand(&cfg).unwrap().len()))
        .collect();
    let want = [
        ("n-sweep", 5),
        ("strategy", 3),
        ("knowledge-source", 5),
        ("extraction-distance", 20),
        ("capacity", 6),
    ];
    for ((name, n), (wn, wc)) in sizes.iter().zip(want) {
        assert_eq!((name.as_str(), *n), (wn, wc));
    }
}

#[test]
fn n_sweep_cells_carry_the_listed_n() {
    let cfg = ExperimentConfig::default();
    let grid = &default_grids()[0];
    let ns: Vec<usize> = grid
        .expand(&cfg)
        .unwrap()
        .iter()
        .map(|c| c.distill.as_ref().unwrap().n)
        .collect();
    assert_eq!(ns, vec![0, 1, 5, 10, 15]);
    assert_eq!(grid.expand(&cfg).unwrap()[0].label, "ET baseline");
    assert_eq!(grid.expand(&cfg).unwrap()[2].label, "UET default");
}

#[test]
fn expansion_dedups_equivalent_cells() {
    let cfg = ExperimentConfig::default();
    // every strategy collapses to ET when N = 0
    let g = AblationGrid {
        n: vec![0],
        strategy: vec![StrategyName::A, StrategyName::B, StrategyName::C],
        ..AblationGrid::default()
    };
    assert_eq!(g.expand(&cfg).unwrap().len(), 1);
}

#[test]
fn invalid_grid_cells_are_rejected() {
    let text = r#"{"grids": [{"name": "bad", "source": ["student"], "logits_mode": [true]}]}"#;
    assert!(ExperimentConfig::from_json(text).is_err());
    let unknown = r#"{"grids": [{"name": "x", "widths": [1]}]}"#;
    assert!(ExperimentConfig::from_json(unknown).is_err());
}

#[test]
fn knowledge_source_rows() {
    let cfg = ExperimentConfig::default();
    let cells = default_grids()[2].expand(&cfg).unwrap();
    let rows: BTreeSet<(String, bool)> = cells
        .iter()
        .map(|c| {
            let d = c.distill.as_ref().unwrap();
            (serde_json::to_value(d.source).unwrap().as_str().unwrap().to_string(), d.residual)
        })
        .collect();
    let want: BTreeSet<(String, bool)> = [
        ("none", false),
        ("student", true),
        ("teacher", true),
        ("teacher", false),
        ("both", true),
    ]
    .into_iter()
    .map(|(s, r)| (s.to_string(), r))
    .collect();
    assert_eq!(rows, want);
}

#[test]
fn std_of_one_seed_is_zero() {
    assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
    let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
    assert_eq!(m, 2.0);
    assert!((s - 1.0).abs() < 1e-15);
}

fn report(label: &str, epochs: usize) -> TrainReport {
    TrainReport {
        label: label.into(),
        role: "student".into(),
        status: Status::Ok,
        error: None,
        width: 8,
        depth: 2,
        config: Default::default(),
        data_digest: String::new(),
        epochs: (1..=epochs)
            .map(|e| EpochRecord {
                epoch: e,
                task_loss: 1.0,
                kd_loss: 0.0,
                eval_accuracy: vec![0.5; 3],
                eval_accuracy_mean: e as f64 / 100.0,
                ratios_used: Vec::new(),
                degenerate_channels: 0,
            })
            .collect(),
        final_accuracy: vec![0.5; 3],
        final_accuracy_mean: 0.5,
        param_digest: String::new(),
        teacher_param_digest_before: None,
        teacher_param_digest_after: None,
        steps: None,
        wall_time_secs: None,
    }
}

#[test]
fn convergence_csv_shape() {
    let csv = emit_convergence(&[report("ET baseline", 30), report("UET default", 30)]).unwrap();
    let mut r = csv::Reader::from_reader(csv.as_bytes());
    let header: Vec<String> = r.headers().unwrap().iter().map(str::to_string).collect();
    assert_eq!(header, ["epoch", "ET baseline", "UET default"]);
    let rows: Vec<_> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 30);
    assert!(rows.iter().all(|row| row.len() == 3));
    assert_eq!(&rows[4][1], "0.05");
}

#[test]
fn convergence_rejects_mismatched_epochs() {
    assert!(emit_convergence(&[report("a", 30), report("b", 20)]).is_err());
    assert!(emit_convergence(&[]).is_err());
}

#[test]
fn report_json_round_trips() {
    let r = report("x", 3);
    let back: TrainReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert_eq!(back, r);
    assert!(!r.to_json().unwrap().contains("wall_time_secs"));
}
