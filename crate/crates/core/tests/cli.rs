use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use cot_progress::trace::read_traces;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_cot-progress"));
    c.env("SOURCE_DATE_EPOCH", "1700000000");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--seed", "7", "--n-traces", "20", "--dim", "8", "--out", s(dir)];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn synth_label_train_smoke_path() {
    let tmp = tempfile::tempdir().unwrap();
    let syn = tmp.path().join("syn");
    synth(&syn, &[]);
    ok(&["label", "--input", s(&syn.join("traces.jsonl")), "--out", s(&tmp.path().join("labels"))]);
    let labels = fs::read_to_string(tmp.path().join("labels/labels.csv")).unwrap();
    assert!(labels.starts_with("trace_id,k,m,bucket\n"));

    let probe = tmp.path().join("probe");
    let stdout = ok(&["probe-train", "--features", s(&syn.join("features.jsonl")), "--seed", "1", "--out", s(&probe)]);
    assert!(stdout.contains("final_loss"));
    assert!(probe.join("probe.pprb").exists());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(probe.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "probe-train");
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["started_at"], 1_700_000_000);
    let inputs = manifest["inputs"].as_array().unwrap();
    assert_eq!(inputs.len(), 21);
    assert_eq!(inputs[0]["sha256"].as_str().unwrap().len(), 64);
    for dir in ["syn", "labels", "probe"] {
        let manifests = fs::read_dir(tmp.path().join(dir))
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name() == "manifest.json")
            .count();
        assert_eq!(manifests, 1);
    }
}

#[test]
fn self_score_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let syn = tmp.path().join("syn");
    synth(&syn, &["--no-features"]);
    let ann = tmp.path().join("ann");
    ok(&["annotate", "--input", s(&syn.join("traces.jsonl")), "--out", s(&ann)]);
    let a = ann.join("annotated.jsonl");
    let stdout = ok(&["score", "--pred", s(&a), "--ref", s(&a), "--out", s(&tmp.path().join("score"))]);
    assert_eq!(stdout.lines().next(), Some("mae 0"));

    let paired = ok(&[
        "score", "--pred", s(&a), "--pred-uncond", s(&a), "--out", s(&tmp.path().join("paired")),
    ]);
    let cond = paired.lines().find(|l| l.starts_with("cond_mae")).unwrap();
    let uncond = paired.lines().find(|l| l.starts_with("uncond_mae")).unwrap();
    assert_eq!(cond.split(' ').nth(1), uncond.split(' ').nth(1));
    let csv = fs::read_to_string(tmp.path().join("paired/mae_by_length.csv")).unwrap();
    assert!(csv.starts_with("bin_lower,bin_upper,count,value\n"));
}

#[test]
fn split_counts_match_direct_count() {
    let tmp = tempfile::tempdir().unwrap();
    let syn = tmp.path().join("syn");
    synth(&syn, &["--no-features", "--min-len", "10", "--max-len", "200"]);
    let traces = read_traces(fs::read(syn.join("traces.jsonl")).unwrap().as_slice()).unwrap();
    let threshold = 100;
    let expected = traces.iter().filter(|t| t.token_count <= threshold).count();
    let out = tmp.path().join("split");
    let stdout = ok(&["split", "--input", s(&syn.join("traces.jsonl")), "--threshold", "100", "--out", s(&out)]);
    assert!(stdout.contains(&format!("in_domain {expected}")));
    assert!(stdout.contains(&format!("held_out {}", traces.len() - expected)));
    let held = read_traces(fs::read(out.join("held_out.jsonl")).unwrap().as_slice()).unwrap();
    assert!(held.iter().all(|t| t.token_count > threshold));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["synth", "--seed", "1", "--out", s(tmp.path()), "--bogus"]).status.code(), Some(64));
    assert_eq!(run(&["synth", "--out", s(tmp.path())]).status.code(), Some(64));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(64));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(
        run(&["score", "--pred", s(&tmp.path().join("missing.jsonl")), "--out", s(tmp.path())]).status.code(),
        Some(2)
    );
    let bad = tmp.path().join("bad.jsonl");
    fs::write(&bad, "{\"id\": \"x\"}\n").unwrap();
    assert_eq!(run(&["split", "--input", s(&bad), "--out", s(tmp.path())]).status.code(), Some(1));
    assert_eq!(
        run(&["synth", "--seed", "1", "--min-len", "3", "--out", s(tmp.path())]).status.code(),
        Some(1)
    );
}

#[test]
fn config_file_values_yield_to_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "[synth]\nseed = 3\nn_traces = 5\nno_features = true\n").unwrap();
    let a = tmp.path().join("a");
    let stdout = ok(&["--config", s(&cfg), "synth", "--out", s(&a)]);
    assert!(stdout.contains("traces 5"));
    assert!(!a.join("features.jsonl").exists());
    let stdout = ok(&["synth", "--config", s(&cfg), "--n-traces", "9", "--out", s(&tmp.path().join("b"))]);
    assert!(stdout.contains("traces 9"));
}

#[test]
fn reruns_are_identical_and_inputs_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let syn = tmp.path().join("syn");
    synth(&syn, &["--no-features"]);
    let ann = tmp.path().join("ann");
    ok(&["annotate", "--input", s(&syn.join("traces.jsonl")), "--out", s(&ann)]);
    let input = ann.join("annotated.jsonl");
    let before = fs::read(&input).unwrap();
    let mut outputs = Vec::new();
    for name in ["m1", "m2"] {
        let out = tmp.path().join(name);
        ok(&[
            "mask", "--input", s(&input), "--seed", "9", "--step", "4", "--total-steps", "8", "--out", s(&out),
        ]);
        outputs.push(fs::read(out.join("masked.jsonl")).unwrap());
        let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
        assert!(manifest.contains("\"total_steps\": 8"));
        assert!(manifest.contains("\"rho_max\": 0.5"));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(fs::read(&input).unwrap(), before);
}

#[test]
fn stream_parse_stdin_to_stdout() {
    let mut child = bin()
        .arg("stream-parse")
        .arg("--chunk-size")
        .arg("3")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all("Étape <progressbar>40</progressbar> ok <progressbar>400</progressbar>".as_bytes())
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let events: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let kinds: Vec<&str> = events.iter().map(|e| e["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds.last(), Some(&"end"));
    let progress: Vec<&serde_json::Value> = events.iter().filter(|e| e["kind"] == "progress").collect();
    assert_eq!(progress.len(), 1);
    assert_eq!(progress[0]["value"], 40);
    assert_eq!(progress[0]["offset"], 7);
    assert_eq!(kinds.iter().filter(|k| **k == "warning").count(), 1);
    let text: String = events
        .iter()
        .filter(|e| e["kind"] == "text")
        .map(|e| e["text"].as_str().unwrap())
        .collect();
    assert_eq!(text, "Étape  ok <progressbar>400</progressbar>");
}

#[test]
fn dispersion_and_monotonicity_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let syn = tmp.path().join("syn");
    synth(&syn, &["--no-features", "--rollouts", "3", "--continuations", "4"]);
    let disp = tmp.path().join("disp");
    let stdout = ok(&["dispersion", "--rollouts", s(&syn.join("rollouts.jsonl")), "--bins", "1", "--metric", "mad", "--out", s(&disp)]);
    let mad_line = stdout.lines().find(|l| l.starts_with("mad ")).unwrap();
    let csv = fs::read_to_string(disp.join("dispersion_bins.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[2], "60");
    assert_eq!(row[3], &mad_line[4..]);

    let ann = tmp.path().join("ann");
    ok(&["annotate", "--input", s(&syn.join("traces.jsonl")), "--out", s(&ann)]);
    let mono = tmp.path().join("mono");
    let stdout = ok(&["monotonicity", "--pred", s(&ann.join("annotated.jsonl")), "--out", s(&mono)]);
    assert!(stdout.contains("nonmonotonic_fraction 0"));
    assert!(mono.join("monotonicity_bins.csv").exists());
}
