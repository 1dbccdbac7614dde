use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dfd(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfd"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn dfd")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let last = text.lines().last().expect("stderr line");
    serde_json::from_str(last).unwrap()
}

const SMALL: &str = r#"
[prompts]
synthetic = 3
synthetic_len = 6

[decode]
max_tokens = 20
num_samples = 2
base_seed = 9

[focus]
transform = "sigmoid"
sigma = 0.5
t0 = 0.7
"#;

#[test]
fn generate_then_metrics() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), SMALL).unwrap();
    ok(&dfd(
        &["generate", "--config", "run.toml", "--out", "gen.jsonl"],
        dir.path(),
    ));

    let text = fs::read_to_string(dir.path().join("gen.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(dir.path().join("gen.jsonl.resolved.toml").exists());

    let report: Value = serde_json::from_str(&ok(&dfd(&["metrics", "gen.jsonl"], dir.path()))).unwrap();
    let overall = &report["overall"];
    assert_eq!(overall["records"], 6);
    for key in ["distinct_1", "distinct_2", "p_bleu", "mean_temperature"] {
        assert!(overall[key].is_f64(), "{key}: {overall}");
    }
    let d2 = overall["distinct_2"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&d2));
}

#[test]
fn resolved_config_reproduces_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{SMALL}calibrate = true\n");
    fs::write(dir.path().join("run.toml"), cfg).unwrap();
    ok(&dfd(
        &["generate", "--config", "run.toml", "--out", "a.jsonl"],
        dir.path(),
    ));
    ok(&dfd(
        &["generate", "--config", "run.toml", "--out", "b.jsonl", "--workers", "1"],
        dir.path(),
    ));
    ok(&dfd(
        &["generate", "--config", "a.jsonl.resolved.toml", "--out", "c.jsonl"],
        dir.path(),
    ));
    let a = fs::read(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.jsonl")).unwrap());
    assert_eq!(a, fs::read(dir.path().join("c.jsonl")).unwrap());

    let resolved = fs::read_to_string(dir.path().join("a.jsonl.resolved.toml")).unwrap();
    assert!(resolved.contains("calibrate = false"), "{resolved}");
}

#[test]
fn identity_calibrates_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let exp = SMALL.replace("\"sigmoid\"", "\"exponential\"");
    fs::write(dir.path().join("run.toml"), exp).unwrap();
    let out = ok(&dfd(
        &[
            "calibrate",
            "--config",
            "run.toml",
            "--provider",
            "identity",
            "--write",
            "cal.toml",
        ],
        dir.path(),
    ));
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["t0"].as_f64(), Some(1.0));
    assert_eq!(v["mean_ka"].as_f64(), Some(0.0));
    let written = fs::read_to_string(dir.path().join("cal.toml")).unwrap();
    assert!(written.contains("t0 = 1.0"), "{written}");

    // Zero KA under the sigmoid transform lands at 1 - sigma / (sigma + 1).
    fs::write(dir.path().join("sig.toml"), SMALL).unwrap();
    let out = ok(&dfd(
        &["calibrate", "--config", "sig.toml", "--provider", "identity"],
        dir.path(),
    ));
    let v: Value = serde_json::from_str(&out).unwrap();
    assert!((v["t0"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12, "{v}");
}

#[test]
fn flops_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&dfd(
        &[
            "flops",
            "--params",
            "8.03e9",
            "--dmodel",
            "4096",
            "--vocab",
            "128256",
            "--layers",
            "32",
            "--lengths",
            "32,64",
            "--json",
        ],
        dir.path(),
    ));
    let rows: Vec<Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["context_len"], 32);
    let base = rows[0]["baseline"].as_f64().unwrap();
    assert!((base / 1e9 - 480.30).abs() < 0.01, "{base}");
    let r = rows[1]["ratio_vs_baseline"].as_f64().unwrap();
    assert!((r - 1.0339).abs() < 1e-4, "{r}");
}

#[test]
fn bad_config_exits_two_with_key() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[limits]\nt_min = 3.0\n").unwrap();
    let out = dfd(&["generate", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let e = stderr_json(&out);
    assert_eq!(e["error"], "config");
    assert_eq!(e["key"], "limits.t_min");

    fs::write(dir.path().join("typo.toml"), "[sampler]\nkindd = \"top-k\"\n").unwrap();
    let out = dfd(&["calibrate", "--config", "typo.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["key"], "sampler.kindd");

    let out = dfd(&["generate", "--provider", "trace"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["key"], "provider.trace");
}

#[test]
fn runtime_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("junk.dfdt"), b"DFDT\x01\x00").unwrap();
    let out = dfd(&["trace-info", "junk.dfdt"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "runtime");

    let out = dfd(&["metrics", "missing.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn trace_record_info_and_greedy_replay() {
    let dir = tempfile::tempdir().unwrap();
    ok(&dfd(
        &[
            "trace-record",
            "--out",
            "t.dfdt",
            "--prompt",
            "3,1,4,1,5",
            "--steps",
            "6",
            "--width",
            "8",
        ],
        dir.path(),
    ));
    let out = ok(&dfd(&["trace-info", "t.dfdt", "--steps"], dir.path()));
    let lines: Vec<Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines[0]["steps"], 6);
    assert_eq!(lines[0]["float_width"], 8);
    assert_eq!(lines.len(), 7);
    assert!(lines[1..].iter().all(|s| s["ka"].as_f64().unwrap() >= 0.0));

    // Top-1 sampling follows the recorded greedy path exactly.
    let cfg = "[provider]\nsource = \"trace\"\ntrace = \"t.dfdt\"\n\n[decode]\nmax_tokens = 6\nnum_samples = 1\n\n\
               [sampler]\nkind = \"top-k\"\nk = 1\n";
    fs::write(dir.path().join("replay.toml"), cfg).unwrap();
    let out = ok(&dfd(&["generate", "--config", "replay.toml"], dir.path()));
    let rec: Value = serde_json::from_str(out.lines().next().unwrap()).unwrap();
    let want: Vec<u64> = lines[1..].iter().map(|s| s["token"].as_u64().unwrap()).collect();
    let got: Vec<u64> = rec["tokens"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t.as_u64().unwrap())
        .collect();
    assert_eq!(got, want);
    for (s, info) in rec["steps"].as_array().unwrap().iter().zip(&lines[1..]) {
        assert_eq!(s["ka"], info["ka"]);
    }
}

#[test]
fn dft_demo_prints_curve() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&dfd(&["dft-demo", "--steps", "4", "--seq-len", "8"], dir.path()));
    let pts: Vec<Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(pts.len(), 4);
    assert!(pts.iter().all(|p| p["ft_loss"].as_f64().unwrap().is_finite()));
}
