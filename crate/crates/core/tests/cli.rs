mod common;

use std::collections::BTreeSet;

use common::{cli, cli_env, path, tiny_pipeline};
use topic_dpr::cli::LoadedRun;
use topic_dpr::corpus::{load_corpus, tokenize, write_corpus, Document};
use topic_dpr::trainer::{build_index, encode_texts, EvalText};

#[test]
fn usage_and_help_codes() {
    let help = cli(&["eval", "--help"]);
    assert_eq!(help.code, 0);
    assert!(help.stdout.contains("--corpus"));
    let unknown = cli(&["frobnicate"]);
    assert_eq!(unknown.code, 1);
    assert!(unknown.stderr.to_lowercase().contains("usage"));
    assert_eq!(cli(&[]).code, 1);
    assert_eq!(cli(&["search", "--out", "x"]).code, 1);
}

#[test]
fn bad_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("bad.jsonl");
    std::fs::write(&corpus, "{\"id\": \"a\", \"title\": \"x\"\n").unwrap();
    let out = cli(&["ingest", "--corpus", path(&corpus), "--out", path(&dir.path().join("o"))]);
    assert_eq!(out.code, 2, "{}", out.stderr);
    assert!(out.stderr.contains("line 1"));
    let manifest = std::fs::read_to_string(dir.path().join("o/manifest.json")).unwrap();
    assert!(manifest.contains("\"status\": \"error"));

    let missing = cli(&["topics", "--corpus", path(&dir.path().join("nope.jsonl")), "--out", path(&dir.path().join("t"))]);
    assert_eq!(missing.code, 2);
}

#[test]
fn pipeline_artifacts_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    tiny_pipeline(root, "topic_prompts");
    for stage in ["synth", "split", "topics", "ckpt", "index", "eval", "bm25", "diag", "search"] {
        let m: serde_json::Value = serde_json::from_slice(&std::fs::read(root.join(stage).join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["status"], "ok", "{stage}");
        assert!(m["version"].as_str().unwrap().starts_with('v'));
        for o in m["outputs"].as_array().unwrap() {
            assert!(std::path::Path::new(o.as_str().unwrap()).exists(), "{stage}: {o}");
        }
    }
    for f in ["config.json", "params.bin", "optimizer.bin", "history.jsonl", "vocab.json", "topics.json"] {
        assert!(root.join("ckpt").join(f).exists(), "{f}");
    }
    let report = std::fs::read_to_string(root.join("topics/report.txt")).unwrap();
    assert!(report.contains("prompt topics (level 1)"));
    assert!(report.lines().any(|l| l.starts_with("node 0 level 0")));
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(root.join("eval/metrics.json")).unwrap()).unwrap();
    assert!(metrics["mrr"]["10"].as_f64().unwrap() > 0.0);
    let tsv = std::fs::read_to_string(root.join("diag/queries.tsv")).unwrap();
    assert!(tsv.lines().nth(1).unwrap().split('\t').nth(1).unwrap().starts_with("topic"));
}

#[test]
fn search_agrees_with_the_library_and_finds_an_identical_passage() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    tiny_pipeline(root, "single_prompt");
    let ckpt = root.join("ckpt");
    // Three-passage index; the query repeats one abstract verbatim.
    let docs: Vec<Document> = load_corpus(root.join("split/train.jsonl")).unwrap().into_iter().take(3).collect();
    let three = root.join("three.jsonl");
    write_corpus(&three, &docs).unwrap();
    assert_eq!(cli(&["index", "--checkpoint", path(&ckpt), "--corpus", path(&three), "--out", path(&root.join("idx3"))]).code, 0);
    let query = docs[1].abstract_text.join(" ");
    let out = cli(&["search", "--checkpoint", path(&ckpt), "--index", path(&root.join("idx3")), "--query", &query, "-k", "3", "--out", path(&root.join("s3"))]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    let first = out.stdout.lines().next().unwrap();
    assert_eq!(first.split('\t').nth(1), Some(docs[1].id.as_str()));

    let loaded = LoadedRun::load(&ckpt).unwrap();
    let set = loaded.eval_set(&docs).unwrap();
    let index = build_index(&loaded.trainer.model, &set.passages).unwrap();
    let tokens = tokenize(&query);
    let text = EvalText {
        id: "query".into(),
        categories: BTreeSet::new(),
        tokens: loaded.vocab.encode(&tokens),
        prompt: loaded.router().unwrap().for_text("query", &tokens).unwrap(),
    };
    let v = encode_texts(&loaded.trainer.model, &[text]).unwrap().remove(0);
    let expected = index.search("query", &v, 3).unwrap();
    let tsv = std::fs::read_to_string(root.join("s3/results.tsv")).unwrap();
    let got: Vec<(String, f64)> = tsv
        .lines()
        .filter(|l| !l.starts_with("query_id"))
        .map(|l| {
            let c: Vec<&str> = l.split('\t').collect();
            (c[2].to_string(), c[3].parse().unwrap())
        })
        .collect();
    assert_eq!(got, expected.results);
}

#[test]
fn config_precedence_and_log_env() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("run.toml");
    std::fs::write(&cfg, "seed = 9\ndocs_per_topic = 5\n[synth]\nnum_topics = 2\nseed = 4\n").unwrap();
    let out = cli(&["synth", "--out", path(&root.join("s")), "--config", path(&cfg), "--seed", "11"]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(root.join("s/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 11);
    assert_eq!(m["config"]["seed"], 11);
    assert_eq!(m["config"]["num_topics"], 2);
    assert_eq!(m["config"]["docs_per_topic"], 5);
    assert_eq!(m["config"]["vocab_size"], 400);
    assert_eq!(load_corpus(root.join("s/corpus.jsonl")).unwrap().len(), 10);

    std::fs::write(&cfg, "[synth]\nnum_topicz = 2\n").unwrap();
    assert_eq!(cli(&["synth", "--out", path(&root.join("s2")), "--config", path(&cfg)]).code, 2);

    let corpus = root.join("s/corpus.jsonl");
    let quiet = cli(&["train", "--train", path(&corpus), "--out", path(&root.join("c1")), "--mode", "no_prompt", "--dim", "8", "--heads", "2", "--layers", "1", "--epochs", "1", "--batch-size", "4"]);
    assert_eq!(quiet.code, 0, "{}", quiet.stderr);
    assert!(!quiet.stderr.contains("loss_total"));
    let loud = cli_env(
        &["train", "--train", path(&corpus), "--out", path(&root.join("c2")), "--mode", "no_prompt", "--dim", "8", "--heads", "2", "--layers", "1", "--epochs", "1", "--batch-size", "4"],
        &[("TOPICDPR_LOG", "info")],
    );
    assert_eq!(loud.code, 0);
    assert!(loud.stderr.contains("loss_total"));
}

#[test]
fn diverging_training_exits_with_numerical_code() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_eq!(cli(&["synth", "--out", path(&root.join("s")), "--num-topics", "2", "--docs-per-topic", "6"]).code, 0);
    let out = cli(&[
        "train", "--train", path(&root.join("s/corpus.jsonl")), "--out", path(&root.join("c")), "--mode", "no_prompt",
        "--dim", "8", "--heads", "2", "--layers", "1", "--epochs", "3", "--batch-size", "4", "--learning-rate", "1e300",
    ]);
    assert_eq!(out.code, 3, "{}", out.stderr);
    let history = std::fs::read_to_string(root.join("c/history.jsonl")).unwrap();
    assert!(history.contains("\"halt\""));
}

#[test]
fn topic_modes_require_a_topic_model() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_eq!(cli(&["synth", "--out", path(&root.join("s")), "--num-topics", "2", "--docs-per-topic", "6"]).code, 0);
    let out = cli(&["train", "--train", path(&root.join("s/corpus.jsonl")), "--out", path(&root.join("c")), "--mode", "topic_prompts"]);
    assert_eq!(out.code, 2);
    assert!(out.stderr.contains("--topics"));
}

#[test]
fn capped_training_checkpoints_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| path(&dir.path().join(s)).to_string();
    assert_eq!(cli(&["synth", "--out", &d("synth"), "--num-topics", "3", "--docs-per-topic", "10", "--vocab-size", "120", "--doc-length", "10", "--seed", "4"]).code, 0);
    assert_eq!(cli(&["ingest", "--corpus", &d("synth/corpus.jsonl"), "--out", &d("split")]).code, 0);
    assert_eq!(cli(&["topics", "--corpus", &d("split/train.jsonl"), "--out", &d("topics"), "--iters", "20"]).code, 0);
    let train = |out: &str, extra: &[&str]| {
        let mut args = vec![
            "train", "--train", &d("split/train.jsonl"), "--topics", &d("topics/topics.json"), "--out", out, "--mode", "topic_prompts",
            "--dim", "16", "--layers", "1", "--heads", "2", "--ff-dim", "32", "--prompt-len", "2", "--epochs", "2", "--batch-size", "8",
        ]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
        args.extend(extra.iter().map(|s| s.to_string()));
        let a: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = cli(&a);
        assert_eq!(out.code, 0, "{}", out.stderr);
    };
    // Three batches per epoch, so four steps ends inside the second epoch.
    let (part, whole) = (d("part"), d("whole"));
    train(&part, &["--max-steps", "4"]);
    assert!(dir.path().join("part/params.bin").exists());
    train(&part, &["--resume"]);
    train(&whole, &[]);
    for f in ["params.bin", "optimizer.bin", "history.jsonl"] {
        let a = std::fs::read(dir.path().join("part").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("whole").join(f)).unwrap();
        assert!(a == b, "{f} differs after resume");
    }
}
