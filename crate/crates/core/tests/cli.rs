//! Exercises the installed binary: exit-status contract, artifact layout,
//! config layering, and the read-only commands' idempotence.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_permllm")
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin()).current_dir(dir).args(args).output().expect("binary runs")
}

fn assert_status(out: &Output, code: i32, ctx: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{ctx}: expected exit {code}, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn pipeline_exit_codes_and_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    // gen -> split -> train -> audit, tiny settings to stay fast
    let out = run(dir, &["gen", "--out", "corpus.jsonl", "--domains", "2", "--records", "30", "--seed", "3"]);
    assert_status(&out, 0, "gen");
    assert!(dir.join("corpus.jsonl").exists());
    assert!(dir.join("corpus.jsonl.meta.json").exists());

    let out = run(
        dir,
        &["split", "--corpus", "corpus.jsonl", "--fraction", "0.8", "--seed", "5", "--train-out", "train.jsonl", "--test-out", "test.jsonl"],
    );
    assert_status(&out, 0, "split");

    let out = run(
        dir,
        &["train", "--corpus", "train.jsonl", "--mechanism", "activate", "--out-dir", "art", "--epochs", "2"],
    );
    assert_status(&out, 0, "train");
    for f in ["model.pllm", "model.vocab.json", "adapters.pllm", "map.json"] {
        assert!(dir.join("art").join(f).exists(), "missing artifact {f}");
    }

    let out = run(
        dir,
        &[
            "audit", "--dir", "art", "--corpus", "train.jsonl", "--game", "distinguishability",
            "--samples", "20", "--ugi-samples", "10", "--report", "report.json",
            "--evidence", "evidence.jsonl",
        ],
    );
    assert_status(&out, 0, "audit");
    assert!(dir.join("report.json").exists());
    assert!(dir.join("evidence.jsonl").exists());

    // report is read-only and idempotent
    let r1 = run(dir, &["report", "--report", "report.json"]);
    let r2 = run(dir, &["report", "--report", "report.json"]);
    assert_status(&r1, 0, "report");
    assert_eq!(r1.stdout, r2.stdout);
    let before = std::fs::read(dir.join("report.json")).unwrap();
    let after = std::fs::read(dir.join("report.json")).unwrap();
    assert_eq!(before, after);
}

#[test]
fn validation_failures_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    // missing artifact named in the error
    let out = run(dir, &["split", "--corpus", "missing.jsonl", "--train-out", "a", "--test-out", "b"]);
    assert_status(&out, 1, "split missing corpus");
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.jsonl"));

    // invalid spec values
    let out = run(dir, &["gen", "--out", "c.jsonl", "--domains", "1"]);
    assert_status(&out, 1, "gen with one domain");

    // unknown flag is a validation error
    let out = run(dir, &["gen", "--out", "c.jsonl", "--bogus"]);
    assert_status(&out, 1, "unknown flag");
}

#[test]
fn merge_on_undeclared_combination_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    run(dir, &["gen", "--out", "c.jsonl", "--domains", "3", "--records", "12", "--seed", "2"]);
    let out = run(
        dir,
        &["train", "--corpus", "c.jsonl", "--mechanism", "merge", "--combos", "d0+d1", "--out-dir", "art", "--epochs", "1"],
    );
    assert_status(&out, 0, "train merge map");

    // declared combination merges fine
    let out = run(dir, &["merge", "--dir", "art", "--combo", "d0+d1"]);
    assert_status(&out, 0, "merge declared combo");

    // undeclared combination is a validation failure
    let out = run(dir, &["merge", "--dir", "art", "--combo", "d0+d2"]);
    assert_status(&out, 1, "merge undeclared combo");
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown combination"));
}

#[test]
fn zero_learning_rate_trains_but_fails_the_audit() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    run(dir, &["gen", "--out", "c.jsonl", "--domains", "2", "--records", "40", "--seed", "4"]);
    let out = run(
        dir,
        &["train", "--corpus", "c.jsonl", "--mechanism", "activate", "--out-dir", "art", "--learning-rate", "0"],
    );
    assert_status(&out, 0, "train with lr 0");

    let out = run(
        dir,
        &[
            "audit", "--dir", "art", "--corpus", "c.jsonl", "--game", "distinguishability",
            "--samples", "40", "--alpha-ddi", "0.8",
        ],
    );
    assert_status(&out, 0, "audit still runs");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("FAIL"), "untrained adapters should fail the game:\n{stdout}");
}

#[test]
fn config_file_layering_and_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    run(dir, &["gen", "--out", "c.jsonl", "--domains", "2", "--records", "12", "--seed", "6"]);

    let cfg = serde_json::json!({
        "epochs": 1,
        "learning_rate": 0.005,
        "batch_size": 2
    });
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&cfg).unwrap()).unwrap();

    // config round-trips through parse -> serialize -> parse
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("run.json")).unwrap()).unwrap();
    let re = serde_json::to_string(&parsed).unwrap();
    let reparsed: serde_json::Value = serde_json::from_str(&re).unwrap();
    assert_eq!(parsed, reparsed);

    // file value applies; flag overrides file
    let out = run(
        dir,
        &["train", "--corpus", "c.jsonl", "--out-dir", "a1", "--config", "run.json"],
    );
    assert_status(&out, 0, "train from config");
    assert!(String::from_utf8_lossy(&out.stdout).contains("6 steps"), "1 epoch x 12 records / batch 2 = 6 steps");

    let out = run(
        dir,
        &["train", "--corpus", "c.jsonl", "--out-dir", "a2", "--config", "run.json", "--batch-size", "1"],
    );
    assert_status(&out, 0, "train with flag override");
    assert!(String::from_utf8_lossy(&out.stdout).contains("12 steps"), "flag beats file");

    // unknown config key is a validation error
    std::fs::write(dir.join("bad.json"), "{\"bogus\": 1}").unwrap();
    let out = run(
        dir,
        &["train", "--corpus", "c.jsonl", "--out-dir", "a3", "--config", "bad.json"],
    );
    assert_status(&out, 1, "unknown config key");
}

#[test]
fn register_query_serve_flow() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    run(dir, &["gen", "--out", "c.jsonl", "--domains", "2", "--records", "12", "--seed", "8"]);
    run(dir, &["train", "--corpus", "c.jsonl", "--out-dir", "art", "--epochs", "1"]);

    let out = run(dir, &["register", "--dir", "art", "--domains", "d0"]);
    assert_status(&out, 0, "register");
    let token = String::from_utf8_lossy(&out.stdout).trim().to_string();
    assert_eq!(token.len(), 32);
    assert!(dir.join("art").join("credentials.json").exists());

    // unknown domain rejected
    let out = run(dir, &["register", "--dir", "art", "--domains", "zz"]);
    assert_status(&out, 1, "register unknown domain");

    // spawn a server on an ephemeral port, query it, then kill it
    let mut child = Command::new(bin())
        .current_dir(dir)
        .args([
            "serve", "--dir", "art", "--listen", "127.0.0.1:0", "--credentials",
            "art/credentials.json",
        ])
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    // parse the bound address from the status line
    let addr = {
        use std::io::{BufRead, BufReader};
        let stdout = child.stdout.take().unwrap();
        let mut reader = BufReader::new(stdout);
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        line.split_whitespace()
            .find(|w| w.starts_with("127.0.0.1:"))
            .expect("address in status line")
            .to_string()
    };
    let out = run(dir, &["query", "--addr", &addr, "--token", &token, "--query", "what is the", "--max-new-tokens", "2"]);
    assert_status(&out, 0, "query");
    assert!(String::from_utf8_lossy(&out.stdout).contains("\"response\""));

    // auth failure surfaces as a runtime error (exit 2)
    let out = run(dir, &["query", "--addr", &addr, "--token", "feedface", "--query", "hello"]);
    assert_status(&out, 2, "query with bad token");

    let _ = child.kill();
    let _ = child.wait();

    // the individual-path flags work too, and the mechanism guard trips
    let out = Command::new(bin())
        .current_dir(dir)
        .args([
            "serve", "--model", "art/model.pllm", "--map", "art/map.json",
            "--mechanism", "merge", "--listen", "127.0.0.1:0",
        ])
        .output()
        .unwrap();
    assert_status(&out, 1, "mechanism guard");
    assert!(String::from_utf8_lossy(&out.stderr).contains("mechanism"));
}
