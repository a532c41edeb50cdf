use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn openmix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_openmix")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = openmix(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

/// Small run: 20 known + 30 unknown seeds, a short path and a handful of epochs.
fn small_config(dir: &Path) -> String {
    let cfg = r#"{
        "dataset": {"n_known_train": 20, "n_test_per_role": 20},
        "generation": {"n_steps": 10},
        "training": {"epochs": 6, "labeling": {"interval": 2, "rounds": 2}},
        "verify": {"pairs": 3}
    }"#;
    let path = dir.join("run.json");
    fs::write(&path, cfg).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn full_pipeline_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("run");
    let out_s = out.to_str().unwrap();

    ok(&["generate", "--config", &cfg, "--out", out_s, "--seed", "5"]);
    let m = manifest(&out);
    assert_eq!(m["seed"], 5);
    assert_eq!(m["stages"]["generate"]["positives"], 50 * 2);
    assert_eq!(m["stages"]["generate"]["negatives"], 50 * 2);
    let pairs = fs::read_to_string(out.join("pairs.csv")).unwrap();
    assert!(pairs.starts_with("seed_id,prompt_class,polarity,feature_0,feature_1"));
    assert_eq!(pairs.lines().count(), 1 + 200);

    ok(&["train", "--config", &cfg, "--out", out_s, "--seed", "5"]);
    let log = fs::read_to_string(out.join("run_log.jsonl")).unwrap();
    let kinds: Vec<String> =
        log.lines().map(|l| serde_json::from_str::<Value>(l).unwrap()["kind"].as_str().unwrap().to_string()).collect();
    assert_eq!(kinds.iter().filter(|k| *k == "epoch").count(), 6);
    assert_eq!(kinds.iter().filter(|k| *k == "labeling").count(), 2);

    let stdout = ok(&["eval", "--config", &cfg, "--out", out_s, "--seed", "5"]);
    assert!(stdout.contains("balance"));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("closed_known_acc,open_known_acc,open_unknown_acc,open_new_acc,balance\n"));
    let metrics: Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    for key in ["closed_known_acc", "open_known_acc", "open_unknown_acc", "open_new_acc"] {
        let v = metrics[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }

    ok(&["verify", "--config", &cfg, "--out", out_s, "--seed", "5"]);
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("verify.json")).unwrap()).unwrap();
    assert!(report["max_inversion_residual"].as_f64().unwrap() < 1e-6);
    assert!(report["max_decomposition_residual"].as_f64().unwrap() < 1e-6);
    assert_eq!(report["depth0_residual"].as_f64().unwrap(), 0.0);
    assert_eq!(report["delta"]["decays"], true);

    let digests = &manifest(&out)["digests"];
    for f in ["pairs.csv", "dataset.csv", "checkpoint.txt", "run_log.jsonl", "metrics.csv", "verify.json"] {
        assert_eq!(digests[f].as_str().unwrap().len(), 64, "{f}");
    }
}

#[test]
fn same_seed_same_digests_across_worker_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let mut digests = Vec::new();
    for (name, workers) in [("a", "1"), ("b", "3")] {
        let out = tmp.path().join(name);
        let out_s = out.to_str().unwrap();
        for cmd in ["generate", "train"] {
            ok(&[cmd, "--config", &cfg, "--out", out_s, "--workers", workers]);
        }
        let mut d = manifest(&out)["digests"].clone();
        // the saved config records --out and --workers themselves
        d.as_object_mut().unwrap().remove("config.json");
        digests.push(d);
    }
    assert_eq!(digests[0], digests[1]);

    let out = tmp.path().join("c");
    ok(&["generate", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "99"]);
    assert_ne!(manifest(&out)["digests"]["pairs.csv"], digests[0]["pairs.csv"]);
}

#[test]
fn epochs_zero_checkpoint_is_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("zero.json");
    fs::write(&cfg_path, r#"{"dataset": {"n_known_train": 10, "n_test_per_role": 5}, "generation": {"n_steps": 4}, "training": {"epochs": 0}}"#).unwrap();
    let cfg = cfg_path.to_str().unwrap();
    let out = tmp.path().join("z");
    let out_s = out.to_str().unwrap();
    ok(&["generate", "--config", cfg, "--out", out_s]);
    ok(&["train", "--config", cfg, "--out", out_s]);
    assert_eq!(fs::read_to_string(out.join("run_log.jsonl")).unwrap(), "");
    let first = fs::read(out.join("checkpoint.txt")).unwrap();
    ok(&["train", "--config", cfg, "--out", out_s]);
    assert_eq!(fs::read(out.join("checkpoint.txt")).unwrap(), first);
}

#[test]
fn missing_inputs_give_actionable_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("empty");
    let out_s = out.to_str().unwrap();

    let train = openmix(&["train", "--out", out_s]);
    assert!(!train.status.success());
    let msg = String::from_utf8_lossy(&train.stderr);
    assert!(msg.contains("pairs.csv") && msg.contains("openmix generate"), "{msg}");

    let eval = openmix(&["eval", "--out", out_s]);
    assert!(!eval.status.success());
    assert!(String::from_utf8_lossy(&eval.stderr).contains("openmix train"));
}

#[test]
fn malformed_world_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("world.json"),
        r#"{"dims": 2, "classes": [{"class": 1, "role": "known"}], "components": [{"class": 1, "weight": 1.0, "mean": [0.0, 0.0], "varaince": 1.0}]}"#,
    )
    .unwrap();
    fs::write(tmp.path().join("cfg.json"), r#"{"world": "world.json"}"#).unwrap();
    let out = openmix(&[
        "verify",
        "--config",
        tmp.path().join("cfg.json").to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("varaince"), "{msg}");
}

#[test]
fn checkpoint_shape_must_match_the_world() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("run");
    let out_s = out.to_str().unwrap();
    ok(&["generate", "--config", &cfg, "--out", out_s]);
    ok(&["train", "--config", &cfg, "--out", out_s]);

    let world = r#"{"dims": 3, "classes": [{"class": 1, "role": "known"}, {"class": 2, "role": "unknown"}, {"class": 3, "role": "new"}],
        "components": [{"class": 1, "weight": 1.0, "mean": [5.0, 0.0, 0.0], "variance": 1.0},
                       {"class": 2, "weight": 1.0, "mean": [0.0, 5.0, 0.0], "variance": 1.0},
                       {"class": 3, "weight": 1.0, "mean": [0.0, 0.0, 5.0], "variance": 1.0}]}"#;
    fs::write(tmp.path().join("w3.json"), world).unwrap();
    fs::write(tmp.path().join("cfg3.json"), r#"{"world": "w3.json", "dataset": {"n_known_train": 5, "n_test_per_role": 5}}"#).unwrap();
    let res = openmix(&[
        "eval",
        "--config",
        tmp.path().join("cfg3.json").to_str().unwrap(),
        "--out",
        tmp.path().join("o3").to_str().unwrap(),
        "--checkpoint",
        out.join("checkpoint.txt").to_str().unwrap(),
    ]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("dims 2"));
}
