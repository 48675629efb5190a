use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cst(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cst"))
        .args(args)
        .env("CST_RUN_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) -> Value {
    let out = cst(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("JSON summary on stdout")
}

fn synth(root: &Path, dir: &str) -> String {
    let out = root.join(dir);
    let s = out.to_str().unwrap().to_string();
    ok(root, &["synth", "--out", &s, "--n-utts", "48", "--n-dev", "6", "--vocab", "10", "--asr-only", "0.25"]);
    s
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const DESK: [&str; 4] = ["--profile", "desk", "--epochs", "1,1,2"];

#[test]
fn synth_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(tmp.path(), "a");
    let b = synth(tmp.path(), "b");
    assert_eq!(tree(Path::new(&a)), tree(Path::new(&b)));
}

#[test]
fn finetune_without_a_checkpoint_names_the_missing_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "data");
    let out = cst(tmp.path(), &[&["finetune", "--data", &data, "--run", "r"][..], &DESK].concat());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("phase2") && err.contains("final.ckpt"), "{err}");
    assert!(!tmp.path().join("r").exists());

    let out = cst(tmp.path(), &[&["pretrain", "--phase", "2", "--data", &data, "--run", "r"][..], &DESK].concat());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("phase1"));
    assert!(!tmp.path().join("r").exists());
}

#[test]
fn invalid_flags_fail_before_the_run_directory_exists() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "data");
    let out = cst(tmp.path(), &[&["ablate", "--mode", "full", "--alpha", "2", "--data", &data, "--run", "r"][..], &DESK].concat());
    assert!(!out.status.success());
    let out = cst(tmp.path(), &[&["ablate", "--mode", "sideways", "--data", &data, "--run", "r"][..], &DESK].concat());
    assert!(!out.status.success());
    assert!(!tmp.path().join("r").exists());
}

#[test]
fn ablate_minus_phase2_equals_pretrain_then_finetune() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "data");
    ok(tmp.path(), &[&["ablate", "--mode", "minus_phase2", "--data", &data, "--run", "a"][..], &DESK].concat());
    ok(tmp.path(), &[&["pretrain", "--phase", "1", "--data", &data, "--run", "b"][..], &DESK].concat());
    let from = tmp.path().join("b/phase1/final.ckpt");
    let summary = ok(
        tmp.path(),
        &[&["finetune", "--from", from.to_str().unwrap(), "--data", &data, "--run", "b"][..], &DESK].concat(),
    );
    assert!(summary["dev_loss"].is_number());
    let a = fs::read(tmp.path().join("a/model.ckpt")).unwrap();
    let b = fs::read(tmp.path().join("b/model.ckpt")).unwrap();
    assert!(a == b, "final models differ");
    for run in ["a", "b"] {
        let m = fs::read_to_string(tmp.path().join(run).join("phase3/metrics.jsonl")).unwrap();
        assert_eq!(m.lines().count(), 2);
        assert!(tmp.path().join(run).join("phase3/epoch_002.ckpt").exists());
    }
    assert!(tmp.path().join("b/config.finetune.json").exists());

    // decoding: beam 1 is greedy
    let greedy = ok(tmp.path(), &["decode", "--data", &data, "--run", "a", "--greedy", "--out", tmp.path().join("g.txt").to_str().unwrap()]);
    let beam1 = ok(tmp.path(), &["decode", "--data", &data, "--run", "a", "--beam", "1", "--out", tmp.path().join("b1.txt").to_str().unwrap()]);
    assert_eq!(fs::read(tmp.path().join("g.txt")).unwrap(), fs::read(tmp.path().join("b1.txt")).unwrap());
    assert_eq!(greedy["utterances"], 6);
    assert_eq!(greedy["bleu"], beam1["bleu"]);
}

#[test]
fn rerun_reproduces_metrics_and_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "data");
    for run in ["x", "y"] {
        ok(tmp.path(), &[&["pretrain", "--phase", "1", "--data", &data, "--run", run][..], &DESK].concat());
        ok(tmp.path(), &[&["pretrain", "--phase", "2", "--data", &data, "--run", run][..], &DESK].concat());
    }
    for f in ["phase1/final.ckpt", "phase2/final.ckpt"] {
        assert!(fs::read(tmp.path().join("x").join(f)).unwrap() == fs::read(tmp.path().join("y").join(f)).unwrap(), "{f}");
    }
    let strip = |run: &str| -> Vec<Value> {
        fs::read_to_string(tmp.path().join(run).join("phase2/metrics.jsonl"))
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("seconds");
                v
            })
            .collect()
    };
    assert_eq!(strip("x"), strip("y"));
}

#[test]
fn alignment_pipeline_feeds_pretraining() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "data");
    let p = |f: &str| tmp.path().join(f).to_str().unwrap().to_string();
    let s = ok(tmp.path(), &["align", "--data", &data, "--out", &p("links.txt")]);
    assert_eq!(s["pairs"], 36);
    let ll = s["forward_log_likelihood"].as_array().unwrap();
    assert!(ll.windows(2).all(|w| w[1].as_f64().unwrap() >= w[0].as_f64().unwrap() - 1e-9));
    ok(tmp.path(), &["build-lexicon", "--data", &data, "--alignment", &p("links.txt"), "--out", &p("lex.tsv")]);
    let s = ok(
        tmp.path(),
        &["assign-targets", "--data", &data, "--alignment", &p("links.txt"), "--lexicon", &p("lex.tsv"), "--out", &p("assign.jsonl")],
    );
    assert_eq!(s["utterances"], 48);
    assert_eq!(fs::read_to_string(p("assign.jsonl")).unwrap().lines().count(), 48);
    let s = ok(
        tmp.path(),
        &[&["pretrain", "--phase", "2", "--from-scratch", "--assignments", &p("assign.jsonl"), "--data", &data, "--run", "r"][..], &DESK]
            .concat(),
    );
    assert_eq!(s["phases"][0]["phase"], "phase2");
    assert!(s["phases"][0]["parts"]["fblt"].is_number());

    // a truncated alignment file is rejected
    let lines = fs::read_to_string(p("links.txt")).unwrap();
    fs::write(p("short.txt"), lines.lines().take(3).collect::<Vec<_>>().join("\n")).unwrap();
    let out = cst(tmp.path(), &["build-lexicon", "--data", &data, "--alignment", &p("short.txt"), "--out", &p("lex2.tsv")]);
    assert!(!out.status.success());
}

#[test]
fn eval_bleu_scores_files() {
    let tmp = tempfile::tempdir().unwrap();
    let (h, r) = (tmp.path().join("h.txt"), tmp.path().join("r.txt"));
    fs::write(&h, "a b c d\n").unwrap();
    fs::write(&r, "A b c d e\n").unwrap();
    let s = ok(tmp.path(), &["eval-bleu", "--hyp", h.to_str().unwrap(), "--ref", r.to_str().unwrap()]);
    assert!((s["bleu"].as_f64().unwrap() - 77.88).abs() < 0.005);
    let out = cst(tmp.path(), &["eval-bleu", "--hyp", tmp.path().join("none.txt").to_str().unwrap(), "--ref", r.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("none.txt"));
}

#[test]
fn gradcheck_command_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let s = ok(tmp.path(), &["gradcheck", "--cases", "5"]);
    assert_eq!(s["pass"], true);
    assert_eq!(s["objectives"].as_object().unwrap().len(), 6);
}
