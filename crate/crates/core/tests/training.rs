use cmn_core::harness::{inspect, run_experiment, DataSource, ExperimentSpec};
use cmn_core::shapeworld::{generate_dataset, save_dataset, Dataset, GeneratorConfig};
use cmn_core::training::{load_checkpoint, read_checkpoint, save_checkpoint, train, train_from, write_checkpoint};
use cmn_core::{Error, Model, ModelKind, Supervision, TrainConfig};

fn small(n: usize, seed: u64) -> Dataset {
    generate_dataset(&GeneratorConfig {
        n_scenes: n,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn tiny_config(iterations: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        embed_dim: 8,
        hidden_dim: 6,
        log_every: 10,
        probe_scenes: 5,
        ..Default::default()
    }
}

#[test]
fn zero_iterations_return_initialization() {
    let cfg = tiny_config(0);
    let out = train(&cfg, &small(3, 1), None, &mut |_| {}).unwrap();
    let init = Model::new(cfg.model_spec(cmn_core::langrep::Vocabulary::shapeworld()), cfg.seed).unwrap();
    for ((n1, a), (n2, b)) in out.checkpoint.params.iter().zip(init.params.iter()) {
        assert_eq!(n1, n2);
        assert_eq!(a.data(), b.data());
    }
    assert_eq!(out.checkpoint.step_count(), 0);
    assert_eq!(out.metrics.len(), 1);
}

#[test]
fn training_is_deterministic_and_logs_metrics() {
    let data = small(20, 2);
    let held = small(5, 99);
    let cfg = tiny_config(30);
    let mut lines = Vec::new();
    let a = train(&cfg, &data, Some(&held), &mut |r| lines.push(serde_json::to_string(r).unwrap())).unwrap();
    let b = train(&cfg, &data, Some(&held), &mut |_| {}).unwrap();
    let bytes = |c| {
        let mut v = Vec::new();
        write_checkpoint(&mut v, c).unwrap();
        v
    };
    assert_eq!(bytes(&a.checkpoint), bytes(&b.checkpoint));
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(lines.len(), 4);
    for l in &lines {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        for key in ["step", "lr_eff", "train_loss", "p_at_1_subj", "p_at_1_pair"] {
            assert!(v.get(key).is_some(), "{key} missing from {l}");
        }
    }
    assert_eq!(a.checkpoint.step_count(), 30);
}

#[test]
fn strong_supervision_needs_objects() {
    let mut data = small(3, 4);
    data.scenes[1].expressions[0].object_cell = None;
    let cfg = TrainConfig {
        supervision: Supervision::Strong,
        ..tiny_config(1)
    };
    assert!(matches!(train(&cfg, &data, None, &mut |_| {}), Err(Error::Config(_))));
    assert!(train(&tiny_config(1), &data, None, &mut |_| {}).is_ok());
}

#[test]
fn divergence_names_iteration_and_scene() {
    let cfg = TrainConfig {
        learning_rate: 1e306,
        momentum: 0.0,
        ..tiny_config(50)
    };
    match train(&cfg, &small(4, 5), None, &mut |_| {}) {
        Err(Error::Diverged { iteration, scene_id }) => {
            assert!(iteration < 50);
            assert!(scene_id.starts_with("scene-"));
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn weak_checkpoint_fine_tunes_with_strong_supervision() {
    let dir = tempfile::tempdir().unwrap();
    let data = small(6, 7);
    let weak = train(&tiny_config(5), &data, None, &mut |_| {}).unwrap();
    let path = dir.path().join("weak.cmn");
    save_checkpoint(&path, &weak.checkpoint).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.config.supervision, Supervision::Weak);
    let strong_cfg = TrainConfig {
        supervision: Supervision::Strong,
        ..tiny_config(5)
    };
    let tuned = train_from(&strong_cfg, loaded.model().unwrap(), &data, None, &mut |_| {}).unwrap();
    assert_eq!(tuned.checkpoint.config.supervision, Supervision::Strong);
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &tuned.checkpoint).unwrap();
    assert_eq!(read_checkpoint(buf.as_slice()).unwrap().config.supervision, Supervision::Strong);
}

#[test]
fn baseline_checkpoint_has_no_relationship_tensors() {
    let cfg = TrainConfig {
        model: ModelKind::BaselineLoc,
        ..tiny_config(3)
    };
    let out = train(&cfg, &small(3, 8), None, &mut |_| {}).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &out.checkpoint).unwrap();
    let back = read_checkpoint(buf.as_slice()).unwrap();
    assert!(back.params.iter().all(|(n, _)| !n.starts_with("rel.")));
    assert!(back.params.iter().all(|(n, _)| !n.contains("beta")));
}

#[test]
fn experiment_writes_artifacts_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let train_path = dir.path().join("train.jsonl");
    let test_path = dir.path().join("test.jsonl");
    save_dataset(&train_path, &small(8, 10)).unwrap();
    save_dataset(&test_path, &small(4, 11)).unwrap();
    let spec = ExperimentSpec {
        data: DataSource::Files {
            train: train_path,
            test: test_path.clone(),
        },
        train: TrainConfig {
            model: ModelKind::BaselineLoc,
            ..tiny_config(4)
        },
        pair_baseline: true,
    };
    let out = dir.path().join("run");
    let r = run_experiment(&spec, Some(&out)).unwrap();
    for f in ["checkpoint.cmn", "object.cmn", "metrics.jsonl", "report.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(r.report.p_at_1_pair.is_some());
    let report: cmn_core::EvalReport =
        serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report, r.report);

    let test = cmn_core::shapeworld::load_dataset(&test_path).unwrap();
    let model = r.checkpoint.model().unwrap();
    let id = test.scenes[0].scene.scene_id.clone();
    let dump = inspect(&model, &test, &id, 0).unwrap();
    assert!(dump.a_rel.is_none());
    let json = serde_json::to_string(&dump).unwrap();
    assert_eq!(serde_json::from_str::<cmn_core::harness::Dump>(&json).unwrap(), dump);
    assert!(matches!(inspect(&model, &test, "missing", 0), Err(Error::NotFound(_))));
    assert!(matches!(inspect(&model, &test, &id, 99), Err(Error::NotFound(_))));
}

#[test]
fn unknown_tokens_are_listed() {
    let mut data = small(1, 12);
    data.scenes[0].expressions[0].tokens[1] = "purple".into();
    data.scenes[0].expressions[0].tokens.push("hexagon".into());
    let model = Model::new(tiny_config(0).model_spec(cmn_core::langrep::Vocabulary::shapeworld()), 0).unwrap();
    match cmn_core::evaluate(&model, None, &data) {
        Err(Error::UnknownTokens(t)) => assert_eq!(t, vec!["purple".to_string(), "hexagon".to_string()]),
        other => panic!("{other:?}"),
    }
}
