use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;
use topicvae::corpus::{BowDocument, Corpus, Split};
use topicvae::synthetic::{generate, SyntheticSpec};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_topicvae"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Writes a labelled synthetic corpus (vocab.txt, train.bow, test.bow) and a
/// small config; returns the config path.
fn workspace(dir: &Path, extra: Value) -> PathBuf {
    let data = generate(&SyntheticSpec {
        docs: 80,
        doc_len: (20, 40),
        ..Default::default()
    })
    .unwrap();
    let vocab: Vec<String> = (0..50).map(|i| format!("w{i}")).collect();
    fs::write(dir.join("vocab.txt"), vocab.join("\n") + "\n").unwrap();
    let docs: Vec<BowDocument> = data
        .corpus
        .documents
        .iter()
        .enumerate()
        .map(|(i, d)| BowDocument::from_counts(d.entries().to_vec(), Some(format!("class{}", i % 3))))
        .collect();
    let labelled = Corpus::new(docs, data.corpus.vocabulary.clone(), Split::Train).unwrap();
    labelled
        .subset(&(0..60).collect::<Vec<_>>(), Split::Train)
        .unwrap()
        .save(dir.join("train.bow"))
        .unwrap();
    labelled
        .subset(&(60..80).collect::<Vec<_>>(), Split::Test)
        .unwrap()
        .save(dir.join("test.bow"))
        .unwrap();

    let mut cfg = json!({
        "variant": "prod",
        "K": 4,
        "hidden": [8],
        "epochs": 3,
        "batch_size": 16,
        "checkpoint_every": 0,
        "vocab": "vocab.txt",
        "train": "train.bow",
        "test": "test.bow",
        "out_dir": "run",
    });
    for (k, v) in extra.as_object().unwrap() {
        if v.is_null() {
            cfg.as_object_mut().unwrap().remove(k);
        } else {
            cfg[k] = v.clone();
        }
    }
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn train(config: &Path, out: &Path) -> Output {
    run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn train_writes_a_complete_run_directory() {
    let tmp = TempDir::new().unwrap();
    let cfg = workspace(tmp.path(), json!({}));
    let out = tmp.path().join("run");
    let res = train(&cfg, &out);
    assert!(res.status.success(), "{}", stderr(&res));
    for f in [
        "best.ckpt",
        "config.json",
        "split.json",
        "train_log.jsonl",
        "report.json",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report["perplexity"].as_f64().unwrap() > 1.0);
    assert!(report["coherence_mean"].is_number());
    assert_eq!(report["per_topic"].as_array().unwrap().len(), 4);
    assert_eq!(
        fs::read_to_string(out.join("train_log.jsonl")).unwrap().lines().count(),
        3
    );
}

#[test]
fn hier_without_t_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = workspace(tmp.path(), json!({"variant": "hier"}));
    let res = train(&cfg, &tmp.path().join("run"));
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("T required for hier"), "{}", stderr(&res));
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn unknown_keys_and_degenerate_truncations_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = workspace(tmp.path(), json!({"learning_rate": 0.1}));
    let res = train(&cfg, &tmp.path().join("run"));
    assert_eq!(res.status.code(), Some(2));
    assert!(
        stderr(&res).contains("unknown config key 'learning_rate'"),
        "{}",
        stderr(&res)
    );

    let cfg = workspace(tmp.path(), json!({"K": 1}));
    let res = train(&cfg, &tmp.path().join("run"));
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("K must be at least 2"), "{}", stderr(&res));
}

#[test]
fn rerun_with_the_same_seed_gives_identical_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let cfg = workspace(tmp.path(), json!({"variant": "hp", "seed": 3}));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(train(&cfg, &a).status.success());
    assert!(train(&cfg, &b).status.success());
    assert_eq!(
        fs::read(a.join("best.ckpt")).unwrap(),
        fs::read(b.join("best.ckpt")).unwrap()
    );

    let c = tmp.path().join("c");
    let res = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        c.to_str().unwrap(),
        "--seed",
        "4",
    ]);
    assert!(res.status.success());
    assert_ne!(
        fs::read(a.join("best.ckpt")).unwrap(),
        fs::read(c.join("best.ckpt")).unwrap()
    );
}

#[test]
fn eval_writes_reports_and_curves() {
    let tmp = TempDir::new().unwrap();
    let cfg = workspace(tmp.path(), json!({}));
    let out = tmp.path().join("run");
    assert!(train(&cfg, &out).status.success());
    let ckpt = out.join("best.ckpt");
    let test = tmp.path().join("test.bow");
    let eval_dir = out.join("eval");
    let res = run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--corpus",
        test.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
        "--curves",
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
    let report: Value = serde_json::from_str(&fs::read_to_string(eval_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["runs"], 2);
    assert!(report["config_hash"].is_string());
    let coverage = fs::read_to_string(eval_dir.join("coverage.csv")).unwrap();
    assert!(coverage.starts_with("index,value\n1,"));
    assert_eq!(coverage.lines().count(), 5);
    assert!(eval_dir.join("sparsity.csv").exists());

    // A config with another seed hashes differently.
    let other = workspace(tmp.path(), json!({"seed": 99}));
    let res = run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--corpus",
        test.to_str().unwrap(),
        "--config",
        other.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("does not match checkpoint"), "{}", stderr(&res));
}

#[test]
fn eval_rejects_a_mismatched_vocabulary_naming_both_sizes() {
    let tmp = TempDir::new().unwrap();
    let cfg = workspace(tmp.path(), json!({}));
    let out = tmp.path().join("run");
    assert!(train(&cfg, &out).status.success());
    let small = tmp.path().join("small.txt");
    fs::write(&small, (0..40).map(|i| format!("t{i}\n")).collect::<String>()).unwrap();
    let res = run(&[
        "eval",
        "--checkpoint",
        out.join("best.ckpt").to_str().unwrap(),
        "--corpus",
        tmp.path().join("test.bow").to_str().unwrap(),
        "--vocab",
        small.to_str().unwrap(),
    ]);
    assert!(!res.status.success());
    let err = stderr(&res);
    assert!(err.contains("V=50") && err.contains("V=40"), "{err}");
}

#[test]
fn topics_lists_every_topic() {
    let tmp = TempDir::new().unwrap();
    let cfg = workspace(tmp.path(), json!({}));
    let out = tmp.path().join("run");
    assert!(train(&cfg, &out).status.success());
    let res = run(&[
        "topics",
        "--checkpoint",
        out.join("best.ckpt").to_str().unwrap(),
        "--top",
        "5",
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
    let text = String::from_utf8(res.stdout).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text
        .lines()
        .all(|l| l.split('\t').nth(1).unwrap().split(' ').count() == 5));
}

#[test]
fn subsets_train_one_run_per_class_count() {
    let tmp = TempDir::new().unwrap();
    let cfg = workspace(tmp.path(), json!({"variant": "hp"}));
    let out = tmp.path().join("subsets");
    let res = run(&[
        "subsets",
        "--config",
        cfg.to_str().unwrap(),
        "--classes",
        "1,2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "classes,gamma1,gamma2,e_alpha,topics_90");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,") && lines[2].starts_with("2,"));
    assert!(out.join("classes-1/best.ckpt").exists() && out.join("classes-2/coverage.csv").exists());
    let json: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!(json["e_alpha_increasing"].is_boolean());
    assert!(String::from_utf8(res.stdout)
        .unwrap()
        .contains("E[alpha] increasing with class count: "));

    let res = run(&[
        "subsets",
        "--config",
        cfg.to_str().unwrap(),
        "--classes",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(!res.status.success());
    assert!(
        stderr(&res).contains("requested 4 classes but the corpus has 3 labels"),
        "{}",
        stderr(&res)
    );
}
