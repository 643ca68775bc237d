use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fgu_core::checkpoint::load_checkpoint;
use fgu_core::experiment::{partition_dataset, ExperimentConfig};
use fgu_core::federation::FederationState;
use fgu_core::graph::{load_graph, save_graph, FeatureStorage, Graph, Masks};
use fgu_core::linalg::Matrix;
use fgu_core::Params64;

const CONFIG: &str = r#"{
  "dataset": {"source": "sbm", "blocks": [[12,0],[12,1],[12,2],[12,0],[12,1],[12,2]],
              "p_in": 0.4, "p_out": 0.01, "d_in": 8, "split": [0.5, 0.1]},
  "clients": 3,
  "federation": {"rounds": 3, "hidden": 8},
  "stages": {"adv": {"nodes": 12, "max_iters": 10}}
}"#;

fn fgu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fgu")).args(args).output().expect("spawn fgu")
}

fn ok(args: &[&str]) {
    let out = fgu(args);
    assert!(out.status.success(), "fgu {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path
}

fn report(dir: &Path) -> serde_json::Value {
    let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    let schema_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas/report.schema.json");
    let schema: serde_json::Value = serde_json::from_str(&fs::read_to_string(schema_path).unwrap()).unwrap();
    let compiled = jsonschema::JSONSchema::compile(&schema).expect("schema compiles");
    if let Err(errors) = compiled.validate(&value) {
        let msgs: Vec<String> = errors.map(|e| format!("{e} at {}", e.instance_path)).collect();
        panic!("report in {} violates schema: {msgs:?}", dir.display());
    }
    value
}

fn two_cliques() -> Graph<f64> {
    let mut edges = Vec::new();
    for base in [0, 10] {
        for i in 0..10 {
            for j in i + 1..10 {
                edges.push((base + i, base + j));
            }
        }
    }
    let features = Matrix::from_fn(20, 2, |i, j| (i * 2 + j) as f64 * 0.25);
    let labels = (0..20).map(|v| v / 10).collect();
    let masks = Masks { train: vec![0, 1, 10, 11], val: vec![2, 12], test: vec![3, 4, 13, 14] };
    Graph::new(features, labels, 2, edges, masks).unwrap()
}

#[test]
fn partition_single_client_copies_the_graph() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("g.json");
    let g = two_cliques();
    save_graph(&g, &input, FeatureStorage::Inline).unwrap();
    let out = tmp.path().join("p");
    ok(&["partition", "--input", s(&input), "--clients", "1", "--out", s(&out)]);
    let client: Graph<f64> = load_graph(out.join("clients/client_0.json")).unwrap();
    assert_eq!(client, g);
    let part: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("partition.json")).unwrap()).unwrap();
    assert_eq!(part["num_clients"], 1);
}

#[test]
fn partition_splits_two_cliques() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("g.json");
    save_graph(&two_cliques(), &input, FeatureStorage::Blob).unwrap();
    let out = tmp.path().join("p");
    ok(&["partition", "--input", s(&input), "--clients", "2", "--out", s(&out)]);
    let mut seen = Vec::new();
    for c in 0..2 {
        let g: Graph<f64> = load_graph(out.join(format!("clients/client_{c}.json"))).unwrap();
        assert_eq!(g.num_nodes(), 10);
        assert_eq!(g.edges().len(), 45);
        let block = g.node_ids()[0] / 10;
        assert!(g.node_ids().iter().all(|&v| v / 10 == block));
        seen.push(block);
    }
    seen.sort_unstable();
    assert_eq!(seen, vec![0, 1]);
}

#[test]
fn missing_paths_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere/graph.json");
    let cases: Vec<Vec<&str>> = vec![
        vec!["partition", "--input", s(&missing), "--out", s(tmp.path())],
        vec!["train", "--config", s(&missing), "--out", s(tmp.path())],
        vec!["unlearn", "--mode", "meta", "--state", s(&missing), "--out", s(tmp.path())],
    ];
    for args in cases {
        let out = fgu(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(s(&missing)), "message does not name the path: {err}");
    }
}

#[test]
fn zero_rounds_keeps_initial_params() {
    let tmp = tempfile::tempdir().unwrap();
    let text = CONFIG.replace(r#""rounds": 3"#, r#""rounds": 0"#);
    let cfg_path = write_config(tmp.path(), &text);
    let out = tmp.path().join("t");
    ok(&["train", "--config", s(&cfg_path), "--out", s(&out), "--seed-train", "4"]);
    let theta: Params64 = load_checkpoint(out.join("theta_o.json")).unwrap();

    let mut cfg: ExperimentConfig = serde_json::from_str(&text).unwrap();
    cfg.seeds.train = 4;
    let data = partition_dataset(&cfg).unwrap();
    let fresh = FederationState::new(data.clients, cfg.federation_config()).unwrap();
    assert_eq!(theta.bit_fingerprint(), fresh.global.bit_fingerprint());
    report(&out);
}

#[test]
fn rerun_is_bitwise_identical_and_clobbering_needs_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), CONFIG);
    let out = tmp.path().join("t");
    ok(&["train", "--config", s(&cfg), "--out", s(&out), "--workers", "2"]);
    let first = fs::read(out.join("theta_o.bin")).unwrap();
    let first_report = report(&out);

    let refused = fgu(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--overwrite"));

    ok(&["train", "--config", s(&cfg), "--out", s(&out), "--overwrite"]);
    assert_eq!(fs::read(out.join("theta_o.bin")).unwrap(), first);
    assert_eq!(report(&out)["accuracy"], first_report["accuracy"]);
}

#[test]
fn unlearn_modes_emit_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), CONFIG);
    let trained = tmp.path().join("t");
    ok(&["train", "--config", s(&cfg), "--out", s(&trained)]);

    let meta = tmp.path().join("meta");
    ok(&["unlearn", "--mode", "meta", "--config", s(&cfg), "--state", s(&trained), "--out", s(&meta)]);
    let rep = report(&meta);
    assert!(rep["distance"].is_object());
    let removals = rep["request"]["removals"].as_array().unwrap();
    assert_eq!(removals.len(), 1);
    let u = removals[0]["client_id"].as_u64().unwrap();
    for f in ["theta_o.json", "theta_star.json", "theta_bar.json", "outcome.json", "metrics.csv", "config.json"] {
        assert!(meta.join(f).exists(), "missing {f}");
    }
    for f in ["theta_bar_u.json", "g_adv.json", "g_adv.provenance.json"] {
        assert!(meta.join(format!("requesters/{u}/{f}")).exists(), "missing {f}");
    }

    let client = tmp.path().join("client");
    ok(&["unlearn", "--mode", "client", "--config", s(&cfg), "--state", s(&trained), "--out", s(&client)]);
    let rep = report(&client);
    assert_eq!(rep["request"]["departing"].as_array().unwrap().len(), 1);

    let eval = tmp.path().join("eval");
    let bar = meta.join("theta_bar.json");
    let star = meta.join("theta_star.json");
    ok(&["evaluate", "--state", s(&meta), "--checkpoint", s(&bar), "--checkpoint", s(&star), "--out", s(&eval)]);
    let rep = report(&eval);
    assert!(rep["accuracy"]["theta_bar"].is_object() && rep["accuracy"]["theta_star"].is_object());
}

#[test]
fn explicit_empty_request_is_a_no_op() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), CONFIG);
    let trained = tmp.path().join("t");
    ok(&["train", "--config", s(&cfg), "--out", s(&trained)]);
    let request = tmp.path().join("request.json");
    fs::write(&request, r#"{"kind": "meta", "removals": []}"#).unwrap();
    let out = tmp.path().join("u");
    ok(&["unlearn", "--mode", "meta", "--config", s(&cfg), "--state", s(&trained), "--request", s(&request), "--out", s(&out)]);
    let rep = report(&out);
    assert_eq!(rep["influenced"].as_array().unwrap().len(), 0);
    assert_eq!(rep["accuracy"]["original"], rep["accuracy"]["unlearned"]);
    let bar: Params64 = load_checkpoint(out.join("theta_bar.json")).unwrap();
    let o: Params64 = load_checkpoint(trained.join("theta_o.json")).unwrap();
    assert_eq!(bar.bit_fingerprint(), o.bit_fingerprint());
}

#[test]
fn attack_without_poison_keeps_accuracy() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), CONFIG);
    let out = tmp.path().join("a");
    ok(&["attack", "--config", s(&cfg), "--ratio", "0", "--out", s(&out)]);
    let rep = report(&out);
    let a = &rep["attack"];
    assert_eq!(a["clean_accuracy"], a["poisoned_accuracy"]);
    assert_eq!(a["poisoned_accuracy"], a["recovered_accuracy"]);

    let poisoned = tmp.path().join("b");
    ok(&["attack", "--config", s(&cfg), "--ratio", "0.3", "--out", s(&poisoned)]);
    let rep = report(&poisoned);
    let injected: usize = rep["attack"]["injected"].as_array().unwrap().iter().map(|c| c["edges"].as_array().unwrap().len()).sum();
    assert!(injected > 0);
}

#[test]
fn unknown_config_fields_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"clients": 3, "rounds": 4}"#);
    let out = fgu(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("t"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rounds"));
}
