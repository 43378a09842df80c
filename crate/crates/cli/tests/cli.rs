use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prosody-bench"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.json");
    let cfg = serde_json::json!({
        "corpus": {"train_size": 12, "val_size": 4, "test_size": 3},
        "training": {"iterations": 20, "eval_every": 10},
        "panel": {"listeners": 4},
    });
    fs::write(&path, cfg.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn missing_config_exits_1_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = bench(&["evaluate", "--config", "/definitely/not/here.json", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn unknown_config_field_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"not_a_field": 1}"#).unwrap();
    let out = tmp.path().join("run");
    let o = bench(&["gen-corpus", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn bad_flag_is_a_usage_error() {
    assert_eq!(bench(&["evaluate", "--polarity", "sideways"]).status.code(), Some(1));
    assert_eq!(bench(&["score", "--criterion", "loudness"]).status.code(), Some(1));
}

#[test]
fn missing_artifact_is_a_runtime_error_with_error_json() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = bench(&["train", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err: Value = serde_json::from_str(&fs::read_to_string(out.join("error.json")).unwrap()).unwrap();
    assert_eq!(err["error"], "missing_artifact");
    assert_eq!(err["exit_code"], 2);
}

#[test]
fn staged_run_then_feature_only_scoring() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("run");
    let out_s = out.to_str().unwrap();
    for stage in ["gen-corpus", "train", "ensemble", "render", "score", "simulate", "report"] {
        let o = bench(&[stage, "--config", &cfg, "--out", out_s]);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["results.json", "results.csv", "report.md", "timing.json", "diversity.json", "scores/summary.json"] {
        assert!(out.join(f).exists(), "{f}");
    }

    // Every artifact header carries provenance.
    let results: Value = serde_json::from_str(&fs::read_to_string(out.join("results.json")).unwrap()).unwrap();
    let digest = results["config_digest"].as_str().unwrap().to_string();
    let scores = fs::read_to_string(out.join("scores/rnn-conv.jsonl")).unwrap();
    let header: Value = serde_json::from_str(scores.lines().next().unwrap()).unwrap();
    assert_eq!(header["config_digest"], digest.as_str());
    assert_eq!(header["seeds"]["corpus"], 20_240_917);
    assert!(header["format_version"].is_u64());

    let feats = out.join("renditions/rnn-conv");
    let a = feats.join("test-00000.A.features.jsonl");
    let b = feats.join("test-00000.B.features.jsonl");
    let o = bench(&["score", "--criterion", "afp-f0", "--features", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    for side in 0..2 {
        assert_eq!(v["counters"][side]["synth_calls"], 0);
        assert_eq!(v["counters"][side]["mel_calls"], 0);
        assert_eq!(v["counters"][side]["pitch_calls"], 0);
    }
    assert_eq!(v["result"]["utterance_id"], "test-00000");

    let wa = feats.join("test-00000.A.wav");
    let wb = feats.join("test-00000.B.wav");
    let o = bench(&["score", "--criterion", "wav-f0", "--wav", wa.to_str().unwrap(), wb.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["counters"][0]["synth_calls"], 0);
    assert_eq!(v["counters"][0]["pitch_calls"], 1);
}

#[test]
fn evaluate_is_reproducible_and_seed_flags_apply() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let run = |name: &str, extra: &[&str]| {
        let out = tmp.path().join(name);
        let mut args = vec!["evaluate", "--config", &cfg, "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        let o = bench(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(out.join("results.json")).unwrap()
    };
    let first = run("a", &[]);
    assert_eq!(first, run("b", &["--workers", "3"]));
    let other = run("c", &["--seed-panel", "31"]);
    assert_ne!(first, other);
    let v: Value = serde_json::from_slice(&other).unwrap();
    assert_eq!(v["seeds"]["panel"], 31);
}
