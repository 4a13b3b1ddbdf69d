use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sketchlab"))
        .current_dir(dir)
        .env_remove("SKETCHLAB_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Toy corpus, classifier and a short agent run inside `dir`.
fn pipeline(dir: &Path, seed: &str) {
    ok(dir, &["gen-toy", "--n", "12", "--out", "toy.ndjson", "--seed", seed]);
    ok(
        dir,
        &[
            "train-classifier", "--data", "toy.ndjson", "--hidden", "8", "--epochs", "2", "--out", "clf.ckpt",
            "--metrics", "clf.csv", "--seed", seed,
        ],
    );
    ok(
        dir,
        &[
            "train-agent", "--data", "toy.ndjson", "--classifier", "clf.ckpt", "--scheme", "ranked", "--episodes",
            "32", "--N", "8", "--out", "agent.ckpt", "--curve", "curve.csv", "--trace", "trace.ndjson", "--seed", seed,
        ],
    );
}

#[test]
fn help_and_version_exit_zero() {
    let dir = TempDir::new().unwrap();
    for flag in ["--help", "--version"] {
        assert_eq!(run(dir.path(), &[flag]).status.code(), Some(0));
    }
    assert_eq!(run(dir.path(), &["p2s", "--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one_and_name_the_flag() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &["gen-toy", "--out", "x.ndjson", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus-flag"));
    assert_eq!(run(dir.path(), &["no-such-command"]).status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &["trace", "--edges", "missing.pgm", "--out", "t.ndjson"]);
    assert_eq!(out.status.code(), Some(2));
    fs::write(dir.path().join("bad.toml"), "[trainer]\nepisodez = 3\n").unwrap();
    let out = run(dir.path(), &["gen-toy", "--out", "x.ndjson", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn same_seed_gives_identical_outputs_and_traces_replay() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    pipeline(a.path(), "11");
    pipeline(b.path(), "11");
    for f in ["toy.ndjson", "clf.csv", "clf.ckpt", "curve.csv", "trace.ndjson", "agent.ckpt"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
    let echo = fs::read_to_string(a.path().join("run-train-agent.toml")).unwrap();
    assert!(echo.starts_with("# command: train-agent\n"));
    assert!(echo.contains("# seed: 11"));

    let out = ok(a.path(), &["replay-check", "--trace", "trace.ndjson", "--classifier", "clf.ckpt"]);
    assert!(out.contains("rewards match"), "{out}");
}

#[test]
fn config_echo_reproduces_the_run() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, &["gen-toy", "--n", "5", "--out", "first.ndjson", "--seed", "3"]);
    fs::rename(d.join("run-gen-toy.toml"), d.join("echo.toml")).unwrap();
    ok(d, &["gen-toy", "--n", "5", "--out", "second.ndjson", "--config", "echo.toml"]);
    assert_eq!(fs::read(d.join("first.ndjson")).unwrap(), fs::read(d.join("second.ndjson")).unwrap());
    ok(d, &["gen-toy", "--n", "5", "--out", "third.ndjson", "--seed", "4"]);
    assert_ne!(fs::read(d.join("first.ndjson")).unwrap(), fs::read(d.join("third.ndjson")).unwrap());
}

#[test]
fn trace_and_resample_a_plus_sign() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let mut pgm = b"P5\n21 21\n255\n".to_vec();
    pgm.extend((0..21 * 21).map(|i| if i % 21 == 10 || i / 21 == 10 { 255u8 } else { 0 }));
    fs::write(d.join("plus.pgm"), pgm).unwrap();
    ok(d, &["trace", "--edges", "plus.pgm", "--out", "plus.ndjson"]);
    let traced = fs::read_to_string(d.join("plus.ndjson")).unwrap();
    let lifts = traced.matches(",1]").count();
    assert_eq!(lifts, 4, "{traced}");
    ok(d, &["resample", "--in", "plus.ndjson", "--out", "coarse.ndjson", "--step", "5"]);
    let coarse = fs::read_to_string(d.join("coarse.ndjson")).unwrap();
    assert!(coarse.len() < traced.len());
}
