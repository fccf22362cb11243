use std::path::Path;
use std::process::{Command, Output};

fn prosody(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prosody"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn with<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    [&["--config", "run.json", "--corpus", "corpus", "--out", "run"][..], extra].concat()
}

const SMALL: &str = r#"{
  "train_fraction": 0.75,
  "stage1": {"steps": 3},
  "sampler": {"epochs": 2},
  "duration": {"steps": 3}
}"#;

#[test]
fn every_subcommand_runs_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.json"), SMALL).unwrap();

    ok(&prosody(d, &with(&["synth-corpus", "--size", "8"])));
    assert!(d.join("corpus/meta.jsonl").exists());
    ok(&prosody(d, &with(&["train-stage1"])));
    ok(&prosody(d, &with(&["train-sampler", "--variant", "semantic"])));
    ok(&prosody(d, &with(&["train-duration"])));
    for name in ["stage1", "sampler", "duration"] {
        assert!(d.join("run").join(name).join("manifest.json").exists(), "{name}");
    }

    let meta = std::fs::read_to_string(d.join("corpus/meta.jsonl")).unwrap();
    let row: serde_json::Value = serde_json::from_str(meta.lines().next().unwrap()).unwrap();
    let id = row["id"].as_str().unwrap();
    ok(&prosody(d, &with(&["infer", "--id", id])));
    let mel = d.join("run/infer").join(format!("{id}.ktns"));
    let a = std::fs::read(&mel).unwrap();
    ok(&prosody(d, &with(&["infer", "--id", id, "--temperature", "0"])));
    assert_eq!(std::fs::read(&mel).unwrap(), a);
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run/infer").join(format!("{id}.json"))).unwrap()).unwrap();
    let frames: u64 = sidecar["durations"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(sidecar["z"].as_array().unwrap().len(), 8);
    assert!(frames > 0);
    ok(&prosody(d, &with(&["infer", "--id", id, "--use-oracle-z"])));

    ok(&prosody(d, &with(&["eval"])));
    let csv = std::fs::read_to_string(d.join("run/eval/metrics.csv")).unwrap();
    assert!(csv.starts_with("condition,"));
    assert!(d.join("run/eval/metrics.dat").exists());
}

#[test]
fn validation_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.json"), r#"{"train_fraction": 2.0}"#).unwrap();
    assert_eq!(prosody(d, &["--config", "bad.json", "train-stage1"]).status.code(), Some(2));
    std::fs::write(d.join("typo.json"), r#"{"sede": 3}"#).unwrap();
    assert_eq!(prosody(d, &["--config", "typo.json", "train-stage1"]).status.code(), Some(2));
    assert_eq!(prosody(d, &["no-such-command"]).status.code(), Some(2));

    ok(&prosody(d, &["--corpus", "c", "synth-corpus", "--size", "4"]));
    // Corpus written with 16 bins, config asks for 20.
    std::fs::write(d.join("bins.json"), r#"{"mel_bins": 20}"#).unwrap();
    let out = prosody(d, &["--config", "bins.json", "--corpus", "c", "train-stage1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mel bins"));
    // No Stage I checkpoint to train a sampler against.
    assert_eq!(prosody(d, &["--corpus", "c", "--out", "r", "train-sampler"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&prosody(d, &["--corpus", "c", "synth-corpus", "--size", "4"]));
    std::fs::write(
        d.join("hot.json"),
        r#"{"train_fraction": 0.75, "stage1": {"steps": 50, "learning_rate": 1e300, "grad_clip": 1e300}}"#,
    )
    .unwrap();
    let out = prosody(d, &["--config", "hot.json", "--corpus", "c", "--out", "r", "train-stage1"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
