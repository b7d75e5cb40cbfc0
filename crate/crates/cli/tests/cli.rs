use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use querypose::data::{write_dataset, SynthConfig};

fn querypose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_querypose")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = querypose(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

const SHORT: [&str; 4] = ["--set", "steps=6", "--set", "batch_size=4"];

#[test]
fn synth_train_eval_infer() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    ok(&["synth", "--seed", "3", "--out", s(&data), "--set", "synth_count=6"]);
    assert!(data.join("manifest.json").exists());

    let mut args = vec!["train", "--dataset", s(&data), "--out", s(&run)];
    args.extend(SHORT);
    ok(&args);
    for f in ["metrics.jsonl", "checkpoint.qpc", "config.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["event"], "config");
    assert_eq!(first["train"]["steps"], 6);

    let ck = run.join("checkpoint.qpc");
    let ev = tmp.path().join("eval");
    ok(&["eval", "--dataset", s(&data), "--checkpoint", s(&ck), "--out", s(&ev)]);
    let report = json(&ev.join("report.json"));
    assert_eq!(report["scoring"], "rescored");
    assert_eq!(report["instances"], 6);
    assert_eq!(report["ap"]["per_threshold"].as_array().unwrap().len(), 10);
    let preds = fs::read_to_string(ev.join("predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 6);

    let ev2 = tmp.path().join("eval2");
    ok(&["eval", "--dataset", s(&data), "--checkpoint", s(&ck), "--out", s(&ev2), "--no-rescore", "--score-a", "0.3"]);
    let report = json(&ev2.join("report.json"));
    assert_eq!(report["scoring"], "bbox-only");
    assert_eq!(report["score_a"], 0.3);

    let inf = tmp.path().join("infer");
    ok(&["infer", "--dataset", s(&data), "--checkpoint", s(&ck), "--out", s(&inf)]);
    assert_eq!(fs::read_to_string(inf.join("predictions.jsonl")).unwrap(), preds);
}

#[test]
fn same_seed_gives_identical_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["synth", "--out", s(&data), "--set", "synth_count=4"]);
    let logs: Vec<String> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = tmp.path().join(name);
            let mut args = vec!["train", "--seed", "7", "--dataset", s(&data), "--out", s(&out)];
            args.extend(SHORT);
            ok(&args);
            fs::read_to_string(out.join("metrics.jsonl")).unwrap()
        })
        .collect();
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn config_file_and_unknown_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "synth_count = 2\nstepz = 3\n").unwrap();
    let out = tmp.path().join("never");
    let res = querypose(&["synth", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("stepz"));
    assert!(!out.exists(), "no work before validation");

    fs::write(&cfg, "synth_count = 2\n").unwrap();
    ok(&["synth", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(json(&out.join("manifest.json"))["count"], 2);

    let res = querypose(&["synth", "--set", "decoder_dim=30", "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn eval_of_empty_dataset_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("empty");
    write_dataset(&data, &[], &SynthConfig::default(), 0).unwrap();
    let small = tmp.path().join("small");
    ok(&["synth", "--out", s(&small), "--set", "synth_count=2"]);
    let run = tmp.path().join("run");
    let mut args = vec!["train", "--dataset", s(&small), "--out", s(&run)];
    args.extend(SHORT);
    ok(&args);
    let res = querypose(&[
        "eval",
        "--dataset",
        s(&data),
        "--checkpoint",
        s(&run.join("checkpoint.qpc")),
        "--out",
        s(&tmp.path().join("e")),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("no"), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn missing_dataset_is_reported() {
    let res = querypose(&["train", "--out", "/nonexistent/run"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("dataset"));
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck"]);
    assert!(out.contains(" 0 failed"), "{out}");
}

#[test]
fn bench_writes_table_and_plot() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["bench", "--reps", "1", "--out", s(tmp.path())]);
    let csv = fs::read_to_string(tmp.path().join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(fs::read_to_string(tmp.path().join("bench.svg")).unwrap().starts_with("<svg"));
}
