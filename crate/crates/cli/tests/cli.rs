//! Integration tests driving the binary end to end on the toy data.

use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_kgner")
}

fn data(name: &str) -> String {
    format!("{}/../../data/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("kgner_cli_{tag}_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn kgner")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

#[test]
fn usage_error_exits_1() {
    let out = run(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn data_error_exits_2() {
    let out = run(&["shortlist", "--triples", "/nonexistent.tsv", "--word", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_triples_exit_2_with_line() {
    let dir = tmp_dir("badtsv");
    let bad = dir.join("bad.tsv");
    std::fs::write(&bad, "A\tr\n").unwrap();
    let out = run(&["shortlist", "--triples", bad.to_str().unwrap(), "--word", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 1"), "{err}");
}

#[test]
fn bad_config_key_exits_1() {
    let dir = tmp_dir("badcfg");
    let cfg = dir.join("bad.json");
    std::fs::write(&cfg, r#"{"kge.bogus": 1}"#).unwrap();
    let out = run(&[
        "shortlist",
        "--triples",
        &data("toy.kg.tsv"),
        "--word",
        "x",
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn shortlist_prints_ranked_pairs() {
    let out = run(&[
        "shortlist",
        "--triples",
        &data("toy.kg.tsv"),
        "--word",
        "Moreno",
        "--k1",
        "2",
        "--k2",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("AliceMoreno"), "{text}");
}

#[test]
fn index_build_writes_json() {
    let dir = tmp_dir("index");
    let out_path = dir.join("index.json");
    let out = run(&[
        "index-build",
        "--triples",
        &data("toy.kg.tsv"),
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&out_path).unwrap()).unwrap();
    assert_eq!(doc["version"], 1);
    assert!(doc["entries"].as_array().unwrap().len() > 10);
}

/// The full toolchain: kge-train, kge-encode, ner-train (all levels),
/// ner-eval, ner-predict on CoNLL and plain text, twice for determinism.
#[test]
fn full_pipeline_round_trip() {
    let dir = tmp_dir("pipeline");
    let kge_ckpt = dir.join("kge.ckpt");
    let ner_ckpt = dir.join("ner.ckpt");
    let config = data("toy.config.json");

    // keep the run short: fewer epochs than the committed toy config
    let fast_cfg = dir.join("fast.json");
    let mut cfg: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(&config).unwrap()).unwrap();
    cfg.insert("kge.epochs".into(), 80.into());
    cfg.insert("ner.epochs".into(), 10.into());
    std::fs::write(&fast_cfg, serde_json::to_string(&cfg).unwrap()).unwrap();
    let fast_cfg = fast_cfg.to_str().unwrap();

    let out = run(&[
        "kge-train",
        "--triples",
        &data("toy.kg.tsv"),
        "--out",
        kge_ckpt.to_str().unwrap(),
        "--config",
        fast_cfg,
        "--seed",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let out = run(&[
        "kge-encode",
        "--checkpoint",
        kge_ckpt.to_str().unwrap(),
        "--entity",
        "BenOkafor",
        "--relation",
        "WorksFor",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let doc: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(doc["dim"], 72); // 3 * (16 + 8)

    let out = run(&[
        "ner-train",
        "--train",
        &data("toy.train.conll"),
        "--dev",
        &data("toy.dev.conll"),
        "--triples",
        &data("toy.kg.tsv"),
        "--kge",
        kge_ckpt.to_str().unwrap(),
        "--out",
        ner_ckpt.to_str().unwrap(),
        "--config",
        fast_cfg,
        "--seed",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("best dev F1"));

    let out = run(&[
        "ner-eval",
        "--checkpoint",
        ner_ckpt.to_str().unwrap(),
        "--data",
        &data("toy.train.conll"),
        "--triples",
        &data("toy.kg.tsv"),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("f1"), "{}", stdout(&out));

    // conll input: predicted tag appended after the gold column
    let pred_path = dir.join("pred.conll");
    let out = run(&[
        "ner-predict",
        "--checkpoint",
        ner_ckpt.to_str().unwrap(),
        "--input",
        &data("toy.dev.conll"),
        "--triples",
        &data("toy.kg.tsv"),
        "--out",
        pred_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&pred_path).unwrap();
    let first_token_line = text
        .lines()
        .find(|l| !l.is_empty() && !l.starts_with("-DOCSTART-"))
        .unwrap();
    assert_eq!(first_token_line.split_whitespace().count(), 3, "{first_token_line}");

    // plain-text input: token + prediction, sentence per line, blank-separated
    let text_in = dir.join("raw.txt");
    std::fs::write(&text_in, "Alice Moreno visited Quasar in Berlin .\n").unwrap();
    let pred_txt = dir.join("pred_text.conll");
    let out = run(&[
        "ner-predict",
        "--checkpoint",
        ner_ckpt.to_str().unwrap(),
        "--input",
        text_in.to_str().unwrap(),
        "--text",
        "--triples",
        &data("toy.kg.tsv"),
        "--out",
        pred_txt.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&pred_txt).unwrap();
    let token_lines: Vec<&str> = text
        .lines()
        .filter(|l| !l.is_empty() && !l.starts_with("-DOCSTART-"))
        .collect();
    assert_eq!(token_lines.len(), 7, "{text}");

    // determinism: predicting twice yields identical output files
    let pred_again = dir.join("pred2.conll");
    let out = run(&[
        "ner-predict",
        "--checkpoint",
        ner_ckpt.to_str().unwrap(),
        "--input",
        &data("toy.dev.conll"),
        "--triples",
        &data("toy.kg.tsv"),
        "--out",
        pred_again.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(
        std::fs::read(&pred_path).unwrap(),
        std::fs::read(&pred_again).unwrap()
    );

    // case sensitivity is observable: a lowercased copy may tag differently
    // but must produce the same token count
    let lower_in = dir.join("raw_lower.txt");
    std::fs::write(&lower_in, "alice moreno visited quasar in berlin .\n").unwrap();
    let pred_lower = dir.join("pred_lower.conll");
    let out = run(&[
        "ner-predict",
        "--checkpoint",
        ner_ckpt.to_str().unwrap(),
        "--input",
        lower_in.to_str().unwrap(),
        "--text",
        "--triples",
        &data("toy.kg.tsv"),
        "--out",
        pred_lower.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let lower_lines = std::fs::read_to_string(&pred_lower).unwrap();
    assert_eq!(
        lower_lines
            .lines()
            .filter(|l| !l.is_empty() && !l.starts_with("-DOCSTART-"))
            .count(),
        7
    );

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn numeric_failure_exits_3() {
    // absurd learning rate with clipping off diverges quickly
    let dir = tmp_dir("diverge");
    let cfg = dir.join("cfg.json");
    let mut base: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(data("toy.config.json")).unwrap()).unwrap();
    base.insert("ner.learning_rate".into(), serde_json::json!(1e18));
    base.insert("ner.clip_norm".into(), serde_json::json!(0.0));
    base.insert("ner.epochs".into(), 8.into());
    base.insert(
        "features.levels".into(),
        serde_json::json!(["word"]),
    );
    std::fs::write(&cfg, serde_json::to_string(&base).unwrap()).unwrap();
    let out = run(&[
        "ner-train",
        "--train",
        &data("toy.train.conll"),
        "--out",
        dir.join("m.ckpt").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn ablate_emits_table_and_sidecar() {
    let dir = tmp_dir("ablate");
    let config = dir.join("cfg.json");
    let mut cfg: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(data("toy.config.json")).unwrap()).unwrap();
    cfg.insert("ner.epochs".into(), 3.into());
    std::fs::write(&config, serde_json::to_string(&cfg).unwrap()).unwrap();
    let sidecar = dir.join("report.json");
    let out = run(&[
        "ablate",
        "--train",
        &data("toy.train.conll"),
        "--eval",
        &data("toy.dev.conll"),
        "--levels",
        "2",
        "--seeds",
        "2",
        "--config",
        config.to_str().unwrap(),
        "--out",
        sidecar.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("word") && text.contains("+char"), "{text}");
    let doc: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&sidecar).unwrap()).unwrap();
    assert_eq!(doc["rows"].as_array().unwrap().len(), 2);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn checkpoint_mismatch_reports_clearly() {
    // feeding a kge checkpoint to ner-eval is a data error
    let dir = tmp_dir("mismatch");
    let kge_ckpt = dir.join("kge.ckpt");
    let out = run(&[
        "kge-train",
        "--triples",
        &data("toy.kg.tsv"),
        "--out",
        kge_ckpt.to_str().unwrap(),
        "--config",
        &data("toy.config.json"),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&[
        "ner-eval",
        "--checkpoint",
        kge_ckpt.to_str().unwrap(),
        "--data",
        &data("toy.dev.conll"),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("kge"), "{err}");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn predict_requires_store_for_global_models() {
    // train a tiny global-level model, then predict without --triples
    let dir = tmp_dir("noglobal");
    let kge_ckpt = dir.join("kge.ckpt");
    let ner_ckpt = dir.join("ner.ckpt");
    let config = dir.join("cfg.json");
    let mut cfg: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(data("toy.config.json")).unwrap()).unwrap();
    cfg.insert("kge.epochs".into(), 5.into());
    cfg.insert("ner.epochs".into(), 2.into());
    std::fs::write(&config, serde_json::to_string(&cfg).unwrap()).unwrap();
    let cfg_path = config.to_str().unwrap();

    assert_eq!(
        run(&[
            "kge-train",
            "--triples",
            &data("toy.kg.tsv"),
            "--out",
            kge_ckpt.to_str().unwrap(),
            "--config",
            cfg_path,
        ])
        .status
        .code(),
        Some(0)
    );
    assert_eq!(
        run(&[
            "ner-train",
            "--train",
            &data("toy.train.conll"),
            "--triples",
            &data("toy.kg.tsv"),
            "--kge",
            kge_ckpt.to_str().unwrap(),
            "--out",
            ner_ckpt.to_str().unwrap(),
            "--config",
            cfg_path,
        ])
        .status
        .code(),
        Some(0)
    );
    let out = run(&[
        "ner-predict",
        "--checkpoint",
        ner_ckpt.to_str().unwrap(),
        "--input",
        &data("toy.dev.conll"),
        "--out",
        dir.join("p.conll").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    std::fs::remove_dir_all(&dir).ok();
}
