#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use topic_dpr::corpus::{generate_synthetic_corpus, split_corpus, CorpusSplit, SplitRatios, SyntheticConfig, Vocabulary};
use topic_dpr::encoder::{EncoderConfig, EncoderParams};
use topic_dpr::model::Model;
use topic_dpr::prompt_bank::{PromptBank, PromptConfig};
use topic_dpr::topic_model::{fit_hlda, HldaConfig, HldaState};
use topic_dpr::trainer::{training_examples, Mode, PromptRouter, TrainConfig, TrainExample, Trainer};

pub struct Fixture {
    pub split: CorpusSplit,
    pub vocab: Vocabulary,
    pub state: HldaState,
}

/// Small planted corpus with a fitted topic model, cheap enough for
/// per-test training runs.
pub fn small_fixture(seed: u64) -> Fixture {
    let cfg = SyntheticConfig {
        num_topics: 3,
        docs_per_topic: 14,
        vocab_size: 150,
        doc_length: 14,
        title_length: 4,
        seed,
        ..SyntheticConfig::default()
    };
    let docs = generate_synthetic_corpus(&cfg).unwrap();
    let split = split_corpus(&docs, SplitRatios::default(), seed).unwrap();
    let vocab = Vocabulary::build(&split.train, 1).unwrap();
    let state = fit_hlda(&split.train, &vocab, HldaConfig { iterations: 40, seed, ..HldaConfig::default() }).unwrap();
    Fixture { split, vocab, state }
}

pub fn tiny_encoder(vocab: usize) -> EncoderConfig {
    EncoderConfig { dim: 16, num_layers: 1, heads: 2, ff_dim: 32, max_len: 32, vocab_size: vocab }
}

pub fn model_for(fx: &Fixture, mode: Mode, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = EncoderParams::init(tiny_encoder(fx.vocab.len()), &mut rng).unwrap();
    let bank = match mode {
        Mode::NoPrompt => None,
        _ => Some(PromptBank::build(&fx.state, &enc, PromptConfig { prompt_len: 4, ..PromptConfig::default() }, None, &mut rng).unwrap()),
    };
    Model::new(enc, bank)
}

pub fn trainer_for(fx: &Fixture, config: TrainConfig) -> (Trainer, Vec<TrainExample>) {
    let model = model_for(fx, config.mode, config.seed);
    let router = PromptRouter::new(config.mode, &model, Some((&fx.state, &fx.vocab))).unwrap();
    let examples = training_examples(&fx.split.train, &fx.vocab, &router).unwrap();
    (Trainer::new(model, config).unwrap(), examples)
}

pub struct CliOutput {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn cli(args: &[&str]) -> CliOutput {
    cli_env(args, &[])
}

pub fn cli_env(args: &[&str], env: &[(&str, &str)]) -> CliOutput {
    let mut cmd = std::process::Command::new(env!("CARGO_BIN_EXE_topic-dpr"));
    cmd.args(args).env_remove("TOPICDPR_LOG");
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("binary runs");
    CliOutput {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn path(p: &std::path::Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Runs synth → ingest → topics → train → index → eval → diagnose → search
/// under `root` with a tiny model, asserting every stage exits 0.
pub fn tiny_pipeline(root: &std::path::Path, mode: &str) {
    let d = |s: &str| root.join(s).to_str().expect("utf-8").to_string();
    let ok = |args: Vec<String>| {
        let a: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = cli(&a);
        assert_eq!(out.code, 0, "{:?}\n{}", a, out.stderr);
    };
    let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    ok(v(&["synth", "--out", &d("synth"), "--num-topics", "3", "--docs-per-topic", "10", "--vocab-size", "120", "--doc-length", "10", "--title-length", "4", "--seed", "2"]));
    ok(v(&["ingest", "--corpus", &d("synth/corpus.jsonl"), "--out", &d("split"), "--seed", "2"]));
    ok(v(&["topics", "--corpus", &d("split/train.jsonl"), "--out", &d("topics"), "--depth", "3", "--iters", "30", "--seed", "2"]));
    ok(v(&[
        "train", "--train", &d("split/train.jsonl"), "--dev", &d("split/dev.jsonl"), "--topics", &d("topics/topics.json"),
        "--out", &d("ckpt"), "--mode", mode, "--dim", "16", "--layers", "1", "--heads", "2", "--ff-dim", "32",
        "--prompt-len", "4", "--epochs", "1", "--batch-size", "8", "--seed", "2",
    ]));
    ok(v(&["index", "--checkpoint", &d("ckpt"), "--corpus", &d("split/test.jsonl"), "--out", &d("index")]));
    ok(v(&["eval", "--checkpoint", &d("ckpt"), "--corpus", &d("split/dev.jsonl"), "--out", &d("eval"), "-k", "1,10"]));
    ok(v(&["eval", "--bm25", "--corpus", &d("split/dev.jsonl"), "--out", &d("bm25"), "-k", "1,10"]));
    ok(v(&["diagnose", "--checkpoint", &d("ckpt"), "--corpus", &d("split/dev.jsonl"), "--out", &d("diag"), "--samples", "200", "--label", "topic"]));
    ok(v(&["search", "--checkpoint", &d("ckpt"), "--index", &d("index"), "--query", "w0001 w0002 w0003", "-k", "3", "--out", &d("search")]));
}
