use std::path::Path;
use std::process::{Command, Output};

fn tsdiff(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsdiff"))
        .args(args)
        .current_dir(dir)
        .env_remove("TSDIFF_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

const TINY: &str = "hidden = 8\nembed = 4\nattention_layers = 2\ndiffusion_steps = 50\ndiffusion_hidden = 8\nepochs = 2\nsolver_h = 0.5\n";

#[test]
fn datagen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.jsonl", "b.jsonl"] {
        ok(&tsdiff(dir.path(), &["datagen", "--oracle", "homogeneous", "--n", "10", "--seed", "7", "--out", name]));
    }
    let a = std::fs::read(dir.path().join("a.jsonl")).unwrap();
    let b = std::fs::read(dir.path().join("b.jsonl")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_tsdiff"))
            .args(["datagen", "--oracle", "hawkes", "--n", "5", "--out", name])
            .env("TSDIFF_SEED", seed)
            .current_dir(dir.path())
            .output()
            .unwrap();
        ok(&out);
        std::fs::read(dir.path().join(name)).unwrap()
    };
    assert_eq!(run("a.jsonl", "3"), run("b.jsonl", "3"));
    assert_ne!(run("c.jsonl", "3"), run("d.jsonl", "4"));
}

#[test]
fn missing_data_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = tsdiff(dir.path(), &["train", "--data", "absent.jsonl", "--out", "m.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[data]:"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = tsdiff(dir.path(), &["synth", "--ckpt", "m.json", "--n", "1", "--out", "s.jsonl", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[usage]:"));
    let out = tsdiff(dir.path(), &["datagen", "--oracle", "hawkes", "--alpha", "3", "--n", "1", "--out", "h.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn malformed_line_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.jsonl"), "{\"t_max\": 1.0, \"events\": [{\"t\": 2.0, \"x\": [1.0]}]}\n").unwrap();
    std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    let out = tsdiff(dir.path(), &["train", "--config", "tiny.cfg", "--data", "bad.jsonl", "--out", "m.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn full_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.cfg"), TINY).unwrap();
    ok(&tsdiff(d, &["datagen", "--oracle", "sinusoidal", "--n", "12", "--seed", "1", "--rho", "0.6,0", "--missing", "0.2", "--out", "data.jsonl"]));
    ok(&tsdiff(d, &["--threads", "2", "train", "--config", "tiny.cfg", "--set", "batch_size=4", "--data", "data.jsonl", "--out", "m.json"]));
    let csv = std::fs::read_to_string(d.join("m.metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("epoch,L1,L2,L3,L4,total"));

    ok(&tsdiff(d, &["synth", "--ckpt", "m.json", "--n", "6", "--seed", "2", "--emit-missing", "--out", "s1.jsonl"]));
    ok(&tsdiff(d, &["--threads", "1", "synth", "--ckpt", "m.json", "--n", "6", "--seed", "2", "--emit-missing", "--out", "s2.jsonl"]));
    assert_eq!(std::fs::read(d.join("s1.jsonl")).unwrap(), std::fs::read(d.join("s2.jsonl")).unwrap());
    let synth = tsdiff::data::load_jsonl(d.join("s1.jsonl")).unwrap();
    assert_eq!(synth.len(), 6);

    ok(&tsdiff(d, &["eval", "--ckpt", "m.json", "--data", "data.jsonl", "--synth", "data.jsonl", "--out", "report.json"]));
    let text = std::fs::read_to_string(d.join("report.json")).unwrap();
    let report: tsdiff::metrics::EvalReport = serde_json::from_str(&text).unwrap();
    for key in ["temporal", "feature", "prd", "tfc", "durations"] {
        assert!(text.contains(&format!("\"{key}\"")), "{key}");
    }
    assert!(report.temporal.is_finite() && report.feature.is_finite());
    let prd = report.prd.unwrap();
    assert!(prd.balanced() >= 0.97);
    assert!((0.0..=1.0).contains(&report.tfc));
    assert!(d.join("report.prd.csv").exists() && d.join("report.durations.csv").exists());
}
