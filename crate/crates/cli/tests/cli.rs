use std::path::Path;
use std::process::{Command, Output};

use kws_core::features::{write_wav, AudioBuffer};

fn kws(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kws")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = kws(args);
    assert!(
        out.status.success(),
        "kws {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn synth(dir: &Path) {
    ok(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        "7",
        "--general-train",
        "40",
        "--general-dev",
        "8",
        "--keyword-train",
        "4",
        "--keyword-dev",
        "2",
        "--eval-positives",
        "4",
        "--eval-negatives",
        "10",
    ]);
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_with_same_seed_is_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth(a.path());
    synth(b.path());
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert!(fa.len() > 10);
    assert_eq!(fa, fb);
}

/// Trains and evaluates in `work`, returning the model bytes and the ROC CSVs.
fn train_and_eval(work: &Path) -> (Vec<u8>, Vec<(String, Vec<u8>)>) {
    let c = work.join("corpus");
    synth(&c);
    let p = |name: &str| c.join(name).display().to_string();
    let model = work.join("m.kws").display().to_string();
    ok(&[
        "train", "--manifest", &p("train.tsv"), "--dev", &p("dev.tsv"), "--units", &p("units.txt"),
        "--out", &model, "--hidden", "16", "--epochs", "2", "--lr", "0.1", "--init-range", "0.1",
        "--batch-size", "4", "--seed", "3",
    ]);
    let roc = work.join("roc");
    ok(&[
        "eval", "--model", &model, "--lexicon", &p("lexicon.txt"), "--keywords", &p("keywords.txt"),
        "--manifest", &p("eval.tsv"), "--out", roc.to_str().unwrap(),
    ]);
    let curves = files(&roc).into_iter().filter(|(n, _)| n.starts_with("roc_")).collect();
    (std::fs::read(&model).unwrap(), curves)
}

#[test]
fn train_then_eval_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (model_a, roc_a) = train_and_eval(a.path());
    let (model_b, roc_b) = train_and_eval(b.path());
    assert_eq!(model_a, model_b);
    assert_eq!(roc_a.len(), 4);
    assert_eq!(roc_a, roc_b);
}

#[test]
fn spotting_silence_logs_nothing() {
    let work = tempfile::tempdir().unwrap();
    let c = work.path().join("corpus");
    synth(&c);
    let p = |name: &str| c.join(name).display().to_string();
    let model = work.path().join("m.kws").display().to_string();
    ok(&[
        "train", "--manifest", &p("train.tsv"), "--dev", &p("dev.tsv"), "--units", &p("units.txt"),
        "--out", &model, "--hidden", "8", "--epochs", "1",
    ]);
    let silence = work.path().join("silence.wav");
    write_wav(&silence, &AudioBuffer::new(vec![0; 48_000])).unwrap();
    let out = ok(&[
        "spot", "--model", &model, "--lexicon", &p("lexicon.txt"), "--keywords", &p("keywords.txt"),
        silence.to_str().unwrap(),
    ]);
    assert_eq!(
        String::from_utf8(out.stdout).unwrap(),
        "stream_id,keyword_id,start_frame,end_frame,score,fired\n"
    );
}

#[test]
fn exit_codes_distinguish_usage_and_data_errors() {
    assert_eq!(kws(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(kws(&["synth"]).status.code(), Some(1));
    let out = kws(&["align", "--model", "/nonexistent/m.kws", "--wav", "/nonexistent/a.wav"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
}
