use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn jmie(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jmie")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path, name: &str, sentences: usize) -> PathBuf {
    let out = dir.join(name);
    let o = jmie(&["synth", "--sentences", &sentences.to_string(), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

/// Every file under `dir` with its path relative to `dir`.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        let name = PathBuf::from(p.file_name().unwrap());
        if p.is_dir() {
            out.extend(tree(&p).into_iter().map(|(q, b)| (name.join(q), b)));
        } else {
            out.push((name, fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn gold_against_itself_scores_one_hundred() {
    let tmp = tempfile::tempdir().unwrap();
    let gold = synth(tmp.path(), "gold", 20);
    let report = tmp.path().join("report");
    let o = jmie(&["evaluate", "--gold", s(&gold), "--pred", s(&gold), "--out", s(&report)]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for stage in ["Concept", "Assertion", "Relation"] {
        let line = text.lines().find(|l| l.starts_with(stage)).unwrap();
        assert!(line.contains("100.0  100.0  100.0"), "{line}");
    }
    assert!(report.join("report.json").is_file());
    assert!(report.join("report.txt").is_file());

    let cmp = jmie(&[
        "evaluate",
        "--compare",
        s(&report.join("report.json")),
        s(&report.join("report.json")),
    ]);
    assert_eq!(cmp.status.code(), Some(0));
}

#[test]
fn synth_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(tmp.path(), "a", 30);
    let b = synth(tmp.path(), "b", 30);
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(!ta.is_empty());
    assert_eq!(ta, tb);
}

#[test]
fn usage_errors_exit_one_and_data_errors_exit_two() {
    assert_eq!(jmie(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(jmie(&["evaluate"]).status.code(), Some(1));
    assert_eq!(jmie(&["--help"]).status.code(), Some(0));

    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    assert_eq!(jmie(&["inspect", s(&missing)]).status.code(), Some(2));

    let data = synth(tmp.path(), "data", 10);
    let o = jmie(&["train", "--train-dir", s(&data), "--lr", "0.5", "--out", s(&tmp.path().join("m"))]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn inspect_counts_documents() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "data", 20);
    let o = jmie(&["inspect", s(&data), "--json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["documents"], 4);
    assert!(v["concepts"].as_u64().unwrap() > 0);

    let plain = stdout(&jmie(&["inspect", s(&data)]));
    assert!(plain.starts_with("documents"));
}

#[test]
fn train_then_predict_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    // The train/dev split needs at least ten documents.
    let data = tmp.path().join("data");
    let o = jmie(&["synth", "--sentences", "24", "--sentences-per-doc", "2", "--out", s(&data)]);
    assert!(o.status.success());
    let model = tmp.path().join("model");
    let o = jmie(&[
        "train",
        "--train-dir",
        s(&data),
        "--test-dir",
        s(&data),
        "--epochs",
        "1",
        "--hidden",
        "4",
        "--unsafe-hparams",
        "--out",
        s(&model),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["model.json", "model.jckp", "runs.jsonl", "report.json"] {
        assert!(model.join(f).is_file(), "{f}");
    }

    let pred = tmp.path().join("pred");
    let o = jmie(&[
        "predict",
        "--model",
        s(&model),
        "--input",
        s(&data),
        "--debug-scores",
        "--out",
        s(&pred),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let debug = fs::read_to_string(pred.join("debug_scores.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(debug.lines().next().unwrap()).unwrap();
    let n = first["tokens"].as_array().unwrap().len();
    assert_eq!(first["tag_scores"].as_array().unwrap().len(), n);
    assert_eq!(first["relation_scores"][0].as_array().unwrap().len(), 9 * n);

    let o = jmie(&["evaluate", "--gold", s(&data), "--pred", s(&pred)]);
    assert_eq!(o.status.code(), Some(0));
}
