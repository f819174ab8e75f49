use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_cogntke");
const SMALL: [&str; 12] = [
    "--embed-dim", "8", "--time-dim", "4", "--layers", "2", "--window", "4", "--batch-size", "32", "--epochs", "1",
];

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("COGNTKE_DATA_DIR")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture(dir: &Path) -> PathBuf {
    let ds = dir.join("ds");
    ok(&[
        "synth", "--out", s(&ds), "--entities", "40", "--relations", "4", "--snapshots", "20", "--periodic", "30",
        "--noise", "2", "--chains", "1", "--rules", "1", "--seed", "3",
    ]);
    ds
}

fn train(ds: &Path, ckpt: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--dataset-dir", s(ds), "--checkpoint", s(ckpt)];
    for pair in SMALL.chunks(2) {
        if !extra.contains(&pair[0]) {
            args.extend_from_slice(pair);
        }
    }
    args.extend_from_slice(extra);
    ok(&args);
}

fn eval(ds: &Path, ckpt: &Path, out: &Path, extra: &[&str]) -> Value {
    let mut args = vec!["eval", "--dataset-dir", s(ds), "--checkpoint", s(ckpt), "--out", s(out)];
    args.extend_from_slice(extra);
    ok(&args);
    serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap()
}

#[test]
fn zero_epoch_checkpoint_gives_valid_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let ds = fixture(dir.path());
    let ck = dir.path().join("ck0");
    train(&ds, &ck, &["--epochs", "0"]);
    let m = eval(&ds, &ck, &dir.path().join("m.json"), &[])["metrics"].clone();
    let (h1, h3, h10, mrr) = (
        m["hits1"].as_f64().unwrap(),
        m["hits3"].as_f64().unwrap(),
        m["hits10"].as_f64().unwrap(),
        m["mrr"].as_f64().unwrap(),
    );
    assert!(h1 <= h3 && h3 <= h10 && (0.0..=100.0).contains(&mrr));
    assert!(m["n_queries"].as_u64().unwrap() > 0);
    assert_eq!(m["split"], "test");
}

#[test]
fn seeded_runs_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ds = fixture(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train(&ds, &a, &["--seed", "5"]);
    train(&ds, &b, &["--seed", "5"]);
    assert_eq!(fs::read(a.join("params.bin")).unwrap(), fs::read(b.join("params.bin")).unwrap());
    let ma = eval(&ds, &a, &dir.path().join("ma.json"), &[]);
    let mb = eval(&ds, &b, &dir.path().join("mb.json"), &[]);
    assert_eq!(ma["metrics"], mb["metrics"]);
    let c = dir.path().join("c");
    train(&ds, &c, &["--seed", "6"]);
    assert_ne!(fs::read(a.join("params.bin")).unwrap(), fs::read(c.join("params.bin")).unwrap());
}

#[test]
fn sweep_rows_match_separate_runs() {
    let dir = tempfile::tempdir().unwrap();
    let ds = fixture(dir.path());
    let csv_path = dir.path().join("sweep.csv");
    let mut args = vec!["sweep", "--dataset-dir", s(&ds), "--layer-grid", "1,2", "--split", "valid", "--out", s(&csv_path)];
    args.extend_from_slice(&SMALL);
    ok(&args);
    let text = fs::read_to_string(&csv_path).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 2);
    for (row, layers) in rows.iter().zip(["1", "2"]) {
        let ck = dir.path().join(format!("L{layers}"));
        train(&ds, &ck, &["--layers", layers]);
        let m = eval(&ds, &ck, &dir.path().join(format!("L{layers}.json")), &["--split", "valid"])["metrics"].clone();
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[1], layers);
        let num = |i: usize| cols[i].parse::<f64>().unwrap();
        assert_eq!(num(5), m["mrr"].as_f64().unwrap());
        assert_eq!(num(6), m["hits1"].as_f64().unwrap());
        assert_eq!(num(7), m["hits3"].as_f64().unwrap());
        assert_eq!(num(8), m["hits10"].as_f64().unwrap());
        assert_eq!(cols[9].parse::<u64>().unwrap(), m["n_queries"].as_u64().unwrap());
    }
}

#[test]
fn flags_override_config_file_and_config_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let ds = fixture(dir.path());
    let conf = dir.path().join("run.conf");
    fs::write(&conf, "# tiny\nembed_dim=8\ntime_dim=4\nlayers=3\nwindow=4\nepochs=0\nseed=9\n").unwrap();
    let ck = dir.path().join("ck");
    ok(&["train", "--config", s(&conf), "--layers", "2", "--dataset-dir", s(&ds), "--checkpoint", s(&ck)]);
    let log: Value = serde_json::from_str(&fs::read_to_string(ck.join("train_log.json")).unwrap()).unwrap();
    assert_eq!(log["config"]["train"]["layers"], 2);
    assert_eq!(log["config"]["train"]["embed_dim"], 8);
    assert_eq!(log["config"]["train"]["seed"], 9);
    let echoed = fs::read_to_string(ck.join("run.conf")).unwrap();
    assert!(echoed.contains("layers=2") && echoed.contains("seed=9"));
    let meta: Value = serde_json::from_str(&fs::read_to_string(ck.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["layers"], 2);
    let m = eval(&ds, &ck, &dir.path().join("m.json"), &[]);
    assert_eq!(m["config"]["train"]["layers"], 2);
}

#[test]
fn data_dir_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let ds = fixture(dir.path());
    let out = Command::new(BIN)
        .args(["inspect"])
        .env("COGNTKE_DATA_DIR", &ds)
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["entities"], 40);
    assert_eq!(v["relations"], 4);
    assert_eq!(v["snapshots"], 20);
    assert_eq!(v["granularity"], 24);
}

#[test]
fn errors_exit_nonzero_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let ds = fixture(dir.path());
    let cases: Vec<Vec<&str>> = vec![
        vec!["eval", "--dataset-dir", s(&ds)],
        vec!["inspect"],
        vec!["inspect", "--dataset-dir", "/nonexistent/dataset"],
        vec!["train", "--dataset-dir", s(&ds), "--checkpoint", "/tmp/x", "--time-dim", "3"],
        vec!["eval", "--dataset-dir", s(&ds), "--checkpoint", "/nonexistent/ckpt"],
    ];
    for args in cases {
        let out = run(&args);
        assert!(!out.status.success(), "{args:?} should fail");
        assert!(String::from_utf8_lossy(&out.stderr).contains("error"), "{args:?}");
    }
    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "no_such_key=1\n").unwrap();
    assert!(!run(&["inspect", "--config", s(&conf), "--dataset-dir", s(&ds)]).status.success());
}

#[test]
fn explain_and_zero_shot_commands() {
    let dir = tempfile::tempdir().unwrap();
    let ds = fixture(dir.path());
    let ck = dir.path().join("ck");
    train(&ds, &ck, &[]);
    let json_path = dir.path().join("x.json");
    let dot_path = dir.path().join("x.dot");
    ok(&[
        "explain", "--dataset-dir", s(&ds), "--checkpoint", s(&ck), "--entity", "actor_0001", "--relation", "rel_01",
        "--time", "17", "--threshold", "0.0", "--out", s(&json_path), "--dot", s(&dot_path),
    ]);
    let x: Value = serde_json::from_str(&fs::read_to_string(&json_path).unwrap()).unwrap();
    assert!(!x["edges"].as_array().unwrap().is_empty());
    assert!(!x["paths"].as_array().unwrap().is_empty());
    assert_eq!(x["query"]["entity"], 1);
    assert!(fs::read_to_string(&dot_path).unwrap().starts_with("digraph"));

    let plain = eval(&ds, &ck, &dir.path().join("plain.json"), &[]);
    let zs_path = dir.path().join("zs.json");
    ok(&["zeroshot", "--dataset-dir", s(&ds), "--checkpoint", s(&ck), "--out", s(&zs_path)]);
    let zs: Value = serde_json::from_str(&fs::read_to_string(&zs_path).unwrap()).unwrap();
    assert_eq!(zs["metrics"], plain["metrics"]);
    assert_eq!(zs["unmatched_relations"].as_array().unwrap().len(), 0);
}
