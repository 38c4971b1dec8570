use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn slimkit(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slimkit"))
        .args(args)
        .current_dir(cwd)
        .env_remove("SLIMKIT_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = slimkit(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], cwd: &Path) -> i32 {
    slimkit(args, cwd).status.code().expect("exit code")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Toy bundles plus a statistics bundle, in a fresh directory.
fn workspace(extra: &[&str]) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["--seed", "5", "toy", "--out", "w", "--prompts", "24", "--eval-prompts", "4", "--tokens", "16"];
    args.extend_from_slice(extra);
    ok(&args, dir.path());
    ok(&["calibrate", "--model", "w/model", "--activations", "w/activations", "--out", "stats"], dir.path());
    dir
}

#[test]
fn budgeted_pipeline_end_to_end() {
    let dir = workspace(&[]);
    let p = dir.path();
    ok(&["slimset", "--embeddings", "w/embeddings", "--size", "12", "--bins", "3", "--out", "core.json"], p);
    let core = json(&p.join("core.json"));
    let ids = core["selected_ids"].as_array().unwrap();
    assert!(!ids.is_empty() && ids.len() <= 12);

    ok(
        &["calibrate", "--model", "w/model", "--activations", "w/activations", "--coreset", "core.json", "--out", "cstats"],
        p,
    );
    let table = ok(&["allocate", "--model", "w/model", "--stats", "cstats", "--budget", "0.73x", "--out", "plan.json"], p);
    assert!(table.contains("plan_hash"));
    ok(
        &[
            "compress", "--model", "w/model", "--stats", "cstats", "--plan", "plan.json", "--eval", "w/eval", "--probes",
            "w/probes", "--out", "out",
        ],
        p,
    );
    for f in ["report.json", "report.txt", "metrics.txt", "plan.json", "checkpoint/manifest.json"] {
        assert!(p.join("out").join(f).exists(), "missing {f}");
    }
    let report = json(&p.join("out/report.json"));
    let original = report["params_original"].as_u64().unwrap() as f64;
    let compressed = report["params_compressed"].as_u64().unwrap() as f64;
    assert!(compressed <= 0.73 * original);
    assert!(report["groups"].as_array().unwrap().iter().all(|g| g["measured_loss"].is_number()));
    assert_eq!(json(&p.join("out/plan.json")), json(&p.join("plan.json")));

    let metrics = ok(&["report", "out/report.json", "--metrics"], p);
    assert!(metrics.contains(&format!("params_compressed {}", compressed as u64)));
    assert!(ok(&["report", "out/report.json"], p).contains("params"));
}

#[test]
fn full_budget_is_lossless() {
    let dir = workspace(&[]);
    let p = dir.path();
    ok(&["compress", "--model", "w/model", "--stats", "stats", "--budget", "1x", "--eval", "w/eval", "--probes", "w/probes", "--out", "out"], p);
    let report = json(&p.join("out/report.json"));
    assert_eq!(report["params_original"], report["params_compressed"]);
    assert!(report["output_max_abs_deviation"].as_f64().unwrap() < 1e-6);
    for g in report["groups"].as_array().unwrap() {
        assert!(g["measured_loss"].as_f64().unwrap() < 1e-12, "{g}");
    }
}

#[test]
fn outputs_are_deterministic() {
    let dir = workspace(&[]);
    let p = dir.path();
    for name in ["a.json", "b.json"] {
        ok(&["slimset", "--embeddings", "w/embeddings", "--size", "10", "--out", name], p);
    }
    assert_eq!(std::fs::read(p.join("a.json")).unwrap(), std::fs::read(p.join("b.json")).unwrap());
    for out in ["o1", "o2"] {
        ok(&["compress", "--model", "w/model", "--stats", "stats", "--budget", "0.8x", "--probes", "w/probes", "--out", out], p);
    }
    for f in ["report.json", "report.txt", "checkpoint/manifest.json"] {
        assert_eq!(std::fs::read(p.join("o1").join(f)).unwrap(), std::fs::read(p.join("o2").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn weighting_changes_the_mixture() {
    let dir = workspace(&[]);
    let p = dir.path();
    ok(&["calibrate", "--model", "w/model", "--activations", "w/activations", "--weighting", "uniform", "--out", "u"], p);
    let trq = json(&p.join("stats/manifest.json"))["metadata"]["mixture_weights"].clone();
    let uniform = json(&p.join("u/manifest.json"))["metadata"]["mixture_weights"].clone();
    assert_ne!(trq, uniform);
    assert_eq!(code(&["calibrate", "--model", "w/model", "--activations", "w/activations", "--weighting", "bogus", "--out", "x"], p), 2);
}

#[test]
fn single_timestep_gets_all_the_weight() {
    let dir = workspace(&["--timesteps", "1"]);
    let table = std::fs::read_to_string(dir.path().join("stats/scores.tsv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    // One row per (block, input kind); cross-attention blocks contribute three.
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r.ends_with("\t1.000000")));
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = workspace(&[]);
    let p = dir.path();
    assert_eq!(code(&["slimset", "--embeddings", "w/embeddings", "--size", "500", "--out", "c.json"], p), 2);
    assert_eq!(code(&["slimset", "--embeddings", "nowhere", "--out", "c.json"], p), 3);
    assert_eq!(code(&["compress", "--model", "w/model", "--stats", "stats", "--budget", "10", "--out", "o"], p), 4);
    assert_eq!(code(&["compress", "--model", "w/model", "--stats", "stats", "--budget", "lots", "--out", "o"], p), 2);
    assert_eq!(code(&["compress", "--model", "w/model", "--stats", "stats", "--out", "o"], p), 2);

    let bad_threads = Command::new(env!("CARGO_BIN_EXE_slimkit"))
        .args(["verify", "--seeds", "1"])
        .env("SLIMKIT_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(bad_threads.status.code(), Some(2));
}

#[test]
fn missing_statistics_are_listed() {
    let dir = workspace(&[]);
    let p = dir.path();
    ok(&["--seed", "5", "toy", "--out", "big", "--blocks", "5", "--prompts", "2", "--eval-prompts", "0"], p);
    let out = slimkit(&["compress", "--model", "big/model", "--stats", "stats", "--budget", "1x", "--out", "o"], p);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("block4/sa_input/t=0") && err.contains("block4/ffn_intermediate/t=3"), "{err}");
}

#[test]
fn verify_passes_and_catches_broken_whitening() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let text = ok(&["verify", "--seeds", "100"], p);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 6);
    assert_eq!(code(&["verify", "--seeds", "10", "--break-whitening"], p), 1);
    assert_eq!(code(&["--threads", "1", "verify", "--seeds", "3"], p), 0);
}
