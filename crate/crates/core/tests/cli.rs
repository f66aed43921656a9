//! Drives the `evc` binary through a complete run on a tiny synthetic corpus.

use std::path::Path;
use std::process::Command;

fn evc(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_evc")).args(args).env("RUST_LOG", "warn").output().unwrap();
    let text = format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    (out.status.code().unwrap_or(-1), text)
}

fn ok(args: &[&str]) -> String {
    let (code, text) = evc(args);
    assert_eq!(code, 0, "evc {args:?} failed:\n{text}");
    text
}

fn p(x: &Path) -> &str {
    x.to_str().unwrap()
}

#[test]
fn full_run_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let corpus = root.join("corpus");
    let manifest = corpus.join("manifest.csv");
    let bundle = root.join("bundle");
    let conv = root.join("conv");

    ok(&["gen-toy", "--out-dir", p(&corpus), "--n-per-class", "5", "--seed", "3"]);
    assert!(corpus.join("config.toml").is_file());
    ok(&["ingest", "--manifest", p(&manifest)]);
    ok(&["train-classifier", "--manifest", p(&manifest), "--out-dir", p(&bundle)]);
    ok(&["train-stage1", "--manifest", p(&manifest), "--out-dir", p(&bundle), "--max-steps", "20"]);
    ok(&["train-stage2", "--manifest", p(&manifest), "--out-dir", p(&bundle)]);
    ok(&["convert-corpus", "--manifest", p(&manifest), "--pairs", "angry:sad,sad:happy", "--bundle", p(&bundle), "--out-dir", p(&conv)]);
    let index = std::fs::read_to_string(conv.join("index.csv")).unwrap();
    assert!(index.starts_with("source_path,source_emotion,target_emotion,output_path"));
    assert_eq!(index.lines().count(), 1 + 2 * 3);

    let input = manifest.parent().unwrap().join(index.lines().nth(1).unwrap().split(',').next().unwrap());
    let one = root.join("one.wav");
    ok(&["convert", "--in", p(&input), "--source", "angry", "--target", "happy", "--bundle", p(&bundle), "--out", p(&one)]);
    assert!(one.is_file());

    let report = root.join("mcd.json");
    let text = ok(&["evaluate-mcd", "--ref-manifest", p(&manifest), "--conv-index", p(&conv.join("index.csv")), "--out", p(&report)]);
    assert!(text.contains("angry->sad") && report.is_file());

    let results = root.join("results.json");
    ok(&["augment-experiment", "--manifest", p(&manifest), "--conv-index", p(&conv.join("index.csv")), "--out", p(&results)]);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&results).unwrap()).unwrap();
    assert_eq!(r["variants"].as_array().unwrap().len(), 2);
    assert_eq!(r["seed"], 3);

    let bad = root.join("bad.toml");
    std::fs::write(&bad, "[model]\nno_such_key = 1\n").unwrap();
    let (code, text) = evc(&["ingest", "--manifest", p(&manifest), "--config", p(&bad)]);
    assert_eq!(code, 2, "{text}");
    assert!(text.contains("no_such_key"));

    let (code, _) = evc(&["ingest", "--manifest", p(&root.join("absent.csv"))]);
    assert_eq!(code, 3);

    let (code, _) = evc(&["convert", "--in", p(&input), "--source", "angry", "--target", "calm", "--bundle", p(&bundle), "--out", p(&one)]);
    assert_eq!(code, 2);
}
