use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn sgst(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgst"))
        .args(args)
        .env("SGST_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sgst(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_string()
}

fn json(stdout: &str) -> serde_json::Value {
    serde_json::from_str(stdout.trim()).unwrap()
}

/// Synthesizes `count` examples and trains a small model on them.
fn trained(dir: &TempDir, count: usize, seed: &str) -> (String, String) {
    let data = path(dir, "data.jsonl");
    let ckpt = path(dir, &format!("model-{seed}.sgst"));
    ok(&[
        "synth",
        "--count",
        &count.to_string(),
        "--seed",
        "3",
        "--out",
        &data,
    ]);
    ok(&[
        "train",
        "--data",
        &data,
        "--checkpoint",
        &ckpt,
        "--seed",
        seed,
        "--epochs",
        "3",
        "--batch-tokens",
        "128",
    ]);
    (data, ckpt)
}

#[test]
fn help_exits_zero_and_unknown_flags_fail() {
    for args in [
        &["--help"][..],
        &["train", "--help"],
        &["generate", "--help"],
        &["eval", "--help"],
    ] {
        assert!(sgst(args).status.success());
    }
    let help = ok(&["generate", "--help"]);
    for flag in [
        "--data",
        "--checkpoint",
        "--out",
        "--beam",
        "--greedy",
        "--max-len",
    ] {
        assert!(help.contains(flag), "{flag} missing from help");
    }
    assert!(!sgst(&["synth", "--bogus"]).status.success());
    assert!(!sgst(&[
        "train",
        "--data",
        "x",
        "--checkpoint",
        "y",
        "--alpha",
        "fixed:3"
    ])
    .status
    .success());
}

#[test]
fn synth_is_reproducible_and_parses() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (path(&dir, "a.jsonl"), path(&dir, "b.jsonl"));
    let report = json(&ok(&["synth", "--count", "64", "--seed", "7", "--out", &a]));
    ok(&["synth", "--count", "64", "--seed", "7", "--out", &b]);
    assert_eq!(report["count"], 64);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    for line in fs::read_to_string(&a).unwrap().lines() {
        let record: serde_json::Value = serde_json::from_str(line).unwrap();
        sgst::graph::parse_scene_graph(record["graph"].to_string().as_bytes()).unwrap();
        assert!(record["paragraph"].is_string());
    }

    let empty = path(&dir, "empty.jsonl");
    ok(&["synth", "--count", "0", "--out", &empty]);
    assert!(fs::read(&empty).unwrap().is_empty());
}

#[test]
fn bad_pool_file_is_rejected() {
    let dir = TempDir::new().unwrap();
    let pools = path(&dir, "pools.json");
    fs::write(
        &pools,
        r#"{"objects": [], "attributes": ["red"], "predicates": ["on"]}"#,
    )
    .unwrap();
    let out = sgst(&["synth", "--pools", &pools, "--out", &path(&dir, "x.jsonl")]);
    assert!(!out.status.success());
}

#[test]
fn missing_dataset_fails_cleanly() {
    let dir = TempDir::new().unwrap();
    let out = sgst(&[
        "train",
        "--data",
        &path(&dir, "nope.jsonl"),
        "--checkpoint",
        &path(&dir, "m"),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.jsonl"));
}

#[test]
fn training_is_reproducible_and_decoding_consistent() {
    let dir = TempDir::new().unwrap();
    let (data, ckpt) = trained(&dir, 12, "1");
    let again = path(&dir, "again.sgst");
    ok(&[
        "train",
        "--data",
        &data,
        "--checkpoint",
        &again,
        "--seed",
        "1",
        "--epochs",
        "3",
        "--batch-tokens",
        "128",
    ]);
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&again).unwrap());
    assert_eq!(
        fs::read(format!("{ckpt}.metrics.jsonl")).unwrap(),
        fs::read(format!("{again}.metrics.jsonl")).unwrap()
    );

    let inspect = json(&ok(&["inspect", "--checkpoint", &ckpt]));
    assert_eq!(inspect["config"]["layers"], 2);

    let (greedy, beam1, beam5, beam5b) = (
        path(&dir, "greedy.jsonl"),
        path(&dir, "beam1.jsonl"),
        path(&dir, "beam5.jsonl"),
        path(&dir, "beam5b.jsonl"),
    );
    let gen = |out: &str, extra: &[&str]| {
        let mut args = vec![
            "generate",
            "--data",
            &data,
            "--checkpoint",
            &ckpt,
            "--out",
            out,
            "--max-len",
            "40",
        ];
        args.extend_from_slice(extra);
        ok(&args);
    };
    gen(&greedy, &["--greedy"]);
    gen(&beam1, &["--beam", "1"]);
    gen(&beam5, &[]);
    gen(&beam5b, &[]);
    assert_eq!(fs::read(&greedy).unwrap(), fs::read(&beam1).unwrap());
    assert_eq!(fs::read(&beam5).unwrap(), fs::read(&beam5b).unwrap());
    assert_eq!(fs::read_to_string(&beam5).unwrap().lines().count(), 12);

    let metrics = json(&ok(&["eval", "--generations", &beam5, "--data", &data]));
    for key in ["bleu4", "cider", "avg_len", "std_len"] {
        assert!(metrics[key].is_number(), "{key}");
    }
}

fn write_generations(path: &Path, data: &str) {
    let mut lines = String::new();
    for (i, line) in fs::read_to_string(data).unwrap().lines().enumerate() {
        let record: serde_json::Value = serde_json::from_str(line).unwrap();
        let tokens: Vec<String> =
            sgst::vocab::tokenize(record["paragraph"].as_str().unwrap()).collect();
        lines.push_str(&serde_json::json!({"graph_id": i, "tokens": tokens, "log_prob": 0.0, "finished": true}).to_string());
        lines.push('\n');
    }
    fs::write(path, lines).unwrap();
}

#[test]
fn eval_of_references_scores_one() {
    let dir = TempDir::new().unwrap();
    let data = path(&dir, "data.jsonl");
    ok(&["synth", "--count", "5", "--seed", "2", "--out", &data]);
    let gens = dir.path().join("gens.jsonl");
    write_generations(&gens, &data);
    let metrics = json(&ok(&[
        "eval",
        "--generations",
        gens.to_str().unwrap(),
        "--data",
        &data,
    ]));
    assert_eq!(metrics["bleu4"], 1.0);

    // Drop one generation: the pairing check must fail.
    let text = fs::read_to_string(&gens).unwrap();
    let partial: Vec<&str> = text.lines().skip(1).collect();
    fs::write(&gens, partial.join("\n")).unwrap();
    assert!(!sgst(&[
        "eval",
        "--generations",
        gens.to_str().unwrap(),
        "--data",
        &data
    ])
    .status
    .success());
}

#[test]
fn inspect_reports_graph_structure() {
    let dir = TempDir::new().unwrap();
    let graph = path(&dir, "g.json");
    fs::write(
        &graph,
        r#"{"objects":[{"id":"o1","label":"man","attributes":["tall"]},{"id":"o2","label":"racket"}],
            "relations":[{"subject":"o1","predicate":"holding","object":"o2"}]}"#,
    )
    .unwrap();
    let report = json(&ok(&["inspect", "--graph", &graph]));
    assert_eq!(report["vertices"].as_array().unwrap().len(), 5);
    // Three graph edges plus both directions between the global vertex and the other four.
    assert_eq!(report["edges"], 11);

    fs::write(&graph, r#"{"objects":[{"id":"o1","label":"man"}],"relations":[{"subject":"o1","predicate":"on","object":"99"}]}"#).unwrap();
    let out = sgst(&["inspect", "--graph", &graph]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("99"));
}
