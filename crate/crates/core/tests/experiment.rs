use fgu_core::adversarial::AdvConfig;
use fgu_core::experiment::{
    build_request, membership_sets, prepare_data, run_attack, run_train, run_unlearn, DatasetSpec, ExperimentConfig,
    MetaLevel, RequestMode, RequestSpec,
};
use fgu_core::federation::FederationConfig;
use fgu_core::graph::SbmConfig;
use fgu_core::pipeline::{StageConfig, UnlearnRequest};

fn config() -> ExperimentConfig {
    let blocks = (0..10).map(|b| (12, (b + b / 5) % 5)).collect();
    ExperimentConfig {
        dataset: DatasetSpec::Sbm(SbmConfig { split: (0.5, 0.1), ..SbmConfig::new(blocks, 0.4, 0.01, 8, 0) }),
        clients: 5,
        federation: FederationConfig { rounds: 3, hidden: 8, lr: 0.01, ..Default::default() },
        stages: StageConfig { adv: AdvConfig { nodes: 12, max_iters: 10, ..Default::default() }, ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn request_sizes_follow_ratios() {
    let cfg = config();
    let data = prepare_data(&cfg).unwrap();
    let (st, _) = run_train(&cfg, &data).unwrap();
    match build_request(&cfg, &st, RequestMode::Client).unwrap() {
        UnlearnRequest::Client { departing } => assert_eq!(departing.len(), 1),
        other => panic!("unexpected {other:?}"),
    }
    match build_request(&cfg, &st, RequestMode::Meta).unwrap() {
        UnlearnRequest::Meta { removals } => {
            assert_eq!(removals.len(), 1);
            let g = &st.clients[removals[0].client_id].graph;
            let want = ((0.1 * g.num_nodes() as f64).ceil() as usize).min(g.masks().train.len());
            assert_eq!(removals[0].removed_nodes.len(), want);
            assert!(removals[0].removed_nodes.iter().all(|v| g.masks().train.contains(v)));
        }
        other => panic!("unexpected {other:?}"),
    }
    let edges = ExperimentConfig { request: RequestSpec { level: MetaLevel::Edge, requesters: 2, ..Default::default() }, ..config() };
    match build_request(&edges, &st, RequestMode::Meta).unwrap() {
        UnlearnRequest::Meta { removals } => {
            assert_eq!(removals.len(), 2);
            assert!(removals.iter().all(|r| r.removed_nodes.is_empty() && !r.removed_edges.is_empty()));
        }
        other => panic!("unexpected {other:?}"),
    }
    let all = ExperimentConfig { request: RequestSpec { ratio: Some(1.0), ..Default::default() }, ..config() };
    assert!(build_request(&all, &st, RequestMode::Client).is_err());
}

#[test]
fn membership_sets_use_forgotten_train_nodes() {
    let cfg = ExperimentConfig { request: RequestSpec { requesters: 3, ..Default::default() }, ..config() };
    let data = prepare_data(&cfg).unwrap();
    let (st, _) = run_train(&cfg, &data).unwrap();
    let req = build_request(&cfg, &st, RequestMode::Meta).unwrap();
    let sets = membership_sets(&st, &req).unwrap();
    assert_eq!(sets.len(), 3);
    for (u, members, non) in sets {
        let g = &st.clients[u].graph;
        assert!(members.iter().all(|v| g.masks().train.contains(v)));
        assert_eq!(non, g.masks().test);
    }
}

#[test]
fn unlearn_report_is_deterministic() {
    let cfg = config();
    let data = prepare_data(&cfg).unwrap();
    let (st, train_report) = run_train(&cfg, &data).unwrap();
    assert!(train_report.accuracy.contains_key("original"));
    let req = build_request(&cfg, &st, RequestMode::Meta).unwrap();
    let a = run_unlearn(&cfg, &st, req.clone()).unwrap();
    let b = run_unlearn(&cfg, &st, req).unwrap();
    assert_eq!(a.report.metric_bits(), b.report.metric_bits());
    for key in ["original", "unlearned", "unlearned_local", "retrain"] {
        assert!(a.report.accuracy.contains_key(key), "missing {key}");
    }
    assert!(a.report.mia.iter().any(|m| m.client.is_none() && m.model == "retrain"));
    assert!(a.report.distance.is_some());
    assert!(a.report.timings.contains_key("stage_adversarial"));

    // Same seeds from scratch give the same numbers.
    let (st2, _) = run_train(&cfg, &prepare_data(&cfg).unwrap()).unwrap();
    let req2 = build_request(&cfg, &st2, RequestMode::Meta).unwrap();
    let c = run_unlearn(&cfg, &st2, req2).unwrap();
    assert_eq!(a.report.metric_bits(), c.report.metric_bits());
}

#[test]
fn toggles_skip_diagnostics() {
    let mut cfg = config();
    cfg.eval.retrain = false;
    cfg.eval.mia = false;
    let data = prepare_data(&cfg).unwrap();
    let (st, _) = run_train(&cfg, &data).unwrap();
    let req = build_request(&cfg, &st, RequestMode::Client).unwrap();
    let run = run_unlearn(&cfg, &st, req).unwrap();
    assert!(run.retrain.is_none() && run.report.mia.is_empty() && run.report.distance.is_none());
    assert!(!run.report.accuracy.contains_key("retrain"));
}

#[test]
fn attack_with_zero_ratio_changes_nothing() {
    let cfg = ExperimentConfig { attack_ratio: 0.0, ..config() };
    let data = prepare_data(&cfg).unwrap();
    let run = run_attack(&cfg, &data).unwrap();
    let attack = run.report.attack.unwrap();
    assert!(run.poison.iter().all(|p| p.is_empty()));
    assert_eq!(attack.clean_accuracy.to_bits(), attack.poisoned_accuracy.to_bits());
    assert_eq!(attack.poisoned_accuracy.to_bits(), attack.recovered_accuracy.to_bits());
}

#[test]
fn config_round_trips_and_rejects_unknown_fields() {
    let cfg = config().resolved();
    let text = serde_json::to_string_pretty(&cfg).unwrap();
    let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    let partial: ExperimentConfig = serde_json::from_str(r#"{"clients": 3}"#).unwrap();
    assert_eq!(partial.clients, 3);
    assert_eq!(partial.federation, FederationConfig::default());
    assert!(serde_json::from_str::<ExperimentConfig>(r#"{"clints": 3}"#).is_err());
    assert!(ExperimentConfig { clients: 1, ..config() }.validate().is_err());
    assert!(ExperimentConfig { attack_ratio: 1.5, ..config() }.validate().is_err());
    let missing = ExperimentConfig { dataset: DatasetSpec::File { path: "/nonexistent/g.json".into() }, ..config() };
    let err = missing.validate().unwrap_err().to_string();
    assert!(err.contains("/nonexistent/g.json"), "{err}");
}
