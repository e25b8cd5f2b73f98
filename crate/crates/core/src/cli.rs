//! Command-line pipeline: synth, ingest, topics, train, index, search, eval
//! and diagnose. Every run writes `manifest.json` into its `--out` directory.
//!
//! Settings resolve as command-line flag, then config-file key, then built-in
//! default. A config file is TOML; keys are flag names with underscores and
//! may sit at the top level or in a table named after the subcommand, which
//! wins.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::corpus::{generate_synthetic_corpus, load_corpus, split_corpus, tokenize, write_corpus, Document, SplitRatios, SyntheticConfig, Vocabulary};
use crate::diagnostics::{diagnose, export_embeddings, DEFAULT_NEGATIVE_SAMPLES};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::prompt_bank::{PromptBank, PromptConfig};
use crate::retrieval::{compute_metrics, relevance, Bm25Index, Bm25Params, DenseIndex, RankedList, RelevanceJudge};
use crate::topic_model::{file_hash, fit_hlda, load_checkpoint, save_checkpoint, HldaConfig, HldaState};
use crate::trainer::{build_index, encode_texts, training_examples, EvalSet, EvalText, Mode, PromptRouter, TrainConfig, Trainer};

pub const VERSION: &str = env!("TOPICDPR_VERSION");

const MANIFEST: &str = "manifest.json";
const VOCAB_FILE: &str = "vocab.json";
const TOPICS_FILE: &str = "topics.json";
const INDEX_FILE: &str = "index.json";

#[derive(Parser)]
#[command(name = "topic-dpr", version = VERSION, about = "Topic-prompted dense retrieval lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-topic synthetic corpus.
    Synth(SynthArgs),
    /// Validate a JSON-lines corpus and split it into train/dev/test.
    Ingest(IngestArgs),
    /// Fit the hierarchical topic model and write a topic report.
    Topics(TopicsArgs),
    /// Fine-tune the encoder and prompts.
    Train(TrainArgs),
    /// Encode passages (abstracts) into a dense index.
    Index(IndexArgs),
    /// Rank indexed passages for one query.
    Search(SearchArgs),
    /// Metrics report on a corpus: titles as queries, abstracts as passages.
    Eval(EvalArgs),
    /// Alignment, uniformity and similarity report plus embedding export.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct Common {
    /// Output directory; receives the artifacts and manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    num_topics: Option<usize>,
    #[arg(long)]
    docs_per_topic: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    doc_length: Option<usize>,
    #[arg(long)]
    title_length: Option<usize>,
    #[arg(long)]
    overlap: Option<f64>,
    #[arg(long)]
    multi_label_fraction: Option<f64>,
    #[arg(long)]
    paraphrase_noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    dev_fraction: Option<f64>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TopicsArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Minimum corpus frequency for a token to enter the vocabulary.
    #[arg(long)]
    min_count: Option<u64>,
    /// Level whose topics become prompts.
    #[arg(long)]
    level: Option<usize>,
    #[arg(long)]
    top_words: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Topic checkpoint from `topics`; required unless the mode is no_prompt.
    #[arg(long)]
    topics: Option<PathBuf>,
    /// topic_prompts, single_prompt or no_prompt.
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    freeze_encoder: bool,
    /// Continue from the checkpoint already in --out.
    #[arg(long)]
    resume: bool,
    /// Stop after this many steps in this invocation.
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    early_stop_k: Option<usize>,
    #[arg(long)]
    topic_encode_cap: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ff_dim: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    prompt_len: Option<usize>,
    #[arg(long)]
    prompt_depth: Option<usize>,
    #[arg(long)]
    top_words: Option<usize>,
    #[arg(long)]
    level: Option<usize>,
    /// Vocabulary cutoff when no topic checkpoint supplies the vocabulary.
    #[arg(long)]
    min_count: Option<u64>,
}

#[derive(Args)]
struct IndexArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory written by `index`.
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    query: String,
    #[arg(short, long)]
    k: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Trained checkpoint; omit with --bm25.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    /// Cutoffs, comma separated.
    #[arg(short, long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// Drop each query's own passage from its ranking.
    #[arg(long)]
    filter_self: bool,
    /// Score with BM25 instead of the dense model.
    #[arg(long)]
    bm25: bool,
    #[arg(long)]
    k1: Option<f64>,
    #[arg(long)]
    b: Option<f64>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Irrelevant pairs sampled for the similarity gap.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Export label: `category` or `topic`.
    #[arg(long)]
    label: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub duration_seconds: f64,
    pub status: String,
    pub config: BTreeMap<String, serde_json::Value>,
}

/// Effective settings for one run.
struct Settings {
    section: &'static str,
    file: toml::Table,
    effective: BTreeMap<String, serde_json::Value>,
}

impl Settings {
    fn load(section: &'static str, path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>().map_err(|e| Error::InvalidArgument(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        if let Some(toml::Value::Table(t)) = file.get(section) {
            for key in t.keys() {
                if !KNOWN_KEYS.contains(&key.as_str()) {
                    return Err(Error::InvalidArgument(format!("config [{section}] has unknown key `{key}`")));
                }
            }
        }
        Ok(Self { section, file, effective: BTreeMap::new() })
    }

    fn from_file<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        let scoped = self.file.get(self.section).and_then(|s| s.as_table()).and_then(|t| t.get(key));
        let top = self.file.get(key).filter(|v| !v.is_table());
        match scoped.or(top) {
            Some(v) => v
                .clone()
                .try_into()
                .map(Some)
                .map_err(|e| Error::InvalidArgument(format!("config key `{key}`: {e}"))),
            None => Ok(None),
        }
    }

    fn pick<T: DeserializeOwned + Serialize>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        let v = match flag {
            Some(v) => v,
            None => self.from_file(key)?.unwrap_or(default),
        };
        self.effective.insert(key.to_string(), serde_json::to_value(&v)?);
        Ok(v)
    }

    fn switch(&mut self, key: &str, flag: bool) -> Result<bool> {
        self.pick(key, flag.then_some(true), false)
    }
}

const KNOWN_KEYS: &[&str] = &[
    "num_topics", "docs_per_topic", "vocab_size", "doc_length", "title_length", "overlap", "multi_label_fraction",
    "paraphrase_noise", "seed", "train_fraction", "dev_fraction", "test_fraction", "depth", "iters", "alpha", "eta",
    "gamma", "min_count", "level", "top_words", "mode", "freeze_encoder", "max_steps", "batch_size", "epochs",
    "learning_rate", "beta1", "beta2", "epsilon", "clip_norm", "warmup_steps", "patience", "early_stop_k",
    "topic_encode_cap", "temperature", "margin", "dim", "layers", "heads", "ff_dim", "max_len", "prompt_len",
    "prompt_depth", "k", "filter_self", "bm25", "k1", "b", "samples", "label",
];

struct Run {
    manifest: RunManifest,
    out: Option<PathBuf>,
}

impl Run {
    fn input(&mut self, p: &Path) {
        self.manifest.inputs.push(p.to_path_buf());
    }

    fn output(&mut self, name: &str) -> PathBuf {
        let p = self.out.as_ref().expect("output directory set").join(name);
        self.manifest.outputs.push(p.clone());
        p
    }

    fn start(&mut self, common: &Common, settings: &Settings) -> Result<()> {
        fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
        self.out = Some(common.out.clone());
        self.manifest.config_path = common.config.clone();
        self.manifest.subcommand = settings.section.to_string();
        Ok(())
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code: 0 success, 1 usage error, 2 data or validation error,
/// 3 numerical failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("TOPICDPR_LOG", "warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let started = Instant::now();
    let mut run = Run {
        manifest: RunManifest {
            subcommand: String::new(),
            config_path: None,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            version: VERSION.to_string(),
            duration_seconds: 0.0,
            status: "ok".into(),
            config: BTreeMap::new(),
        },
        out: None,
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a, &mut run),
        Command::Ingest(a) => ingest(a, &mut run),
        Command::Topics(a) => topics(a, &mut run),
        Command::Train(a) => train(a, &mut run),
        Command::Index(a) => index(a, &mut run),
        Command::Search(a) => search(a, &mut run),
        Command::Eval(a) => eval(a, &mut run),
        Command::Diagnose(a) => diagnose_cmd(a, &mut run),
    };
    if let Err(e) = &result {
        run.manifest.status = format!("error: {e}");
    }
    run.manifest.duration_seconds = started.elapsed().as_secs_f64();
    let written = match &run.out {
        Some(dir) => serde_json::to_vec_pretty(&run.manifest)
            .map_err(Error::from)
            .and_then(|b| fs::write(dir.join(MANIFEST), b).map_err(|e| Error::io(dir.join(MANIFEST), e))),
        None => Ok(()),
    };
    match result.and(written) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                3
            } else {
                2
            }
        }
    }
}

fn finish_settings(run: &mut Run, settings: Settings, seed: Option<u64>) {
    run.manifest.config = settings.effective;
    run.manifest.seed = seed;
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_vec_pretty(value)?;
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn synth(a: SynthArgs, run: &mut Run) -> Result<()> {
    let mut s = Settings::load("synth", a.common.config.as_deref())?;
    run.start(&a.common, &s)?;
    let d = SyntheticConfig::default();
    let cfg = SyntheticConfig {
        num_topics: s.pick("num_topics", a.num_topics, d.num_topics)?,
        docs_per_topic: s.pick("docs_per_topic", a.docs_per_topic, d.docs_per_topic)?,
        vocab_size: s.pick("vocab_size", a.vocab_size, d.vocab_size)?,
        doc_length: s.pick("doc_length", a.doc_length, d.doc_length)?,
        title_length: s.pick("title_length", a.title_length, d.title_length)?,
        overlap: s.pick("overlap", a.overlap, d.overlap)?,
        multi_label_fraction: s.pick("multi_label_fraction", a.multi_label_fraction, d.multi_label_fraction)?,
        paraphrase_noise: s.pick("paraphrase_noise", a.paraphrase_noise, d.paraphrase_noise)?,
        seed: s.pick("seed", a.seed, d.seed)?,
    };
    finish_settings(run, s, Some(cfg.seed));
    let docs = generate_synthetic_corpus(&cfg)?;
    write_corpus(run.output("corpus.jsonl"), &docs)?;
    println!("wrote {} documents", docs.len());
    Ok(())
}

fn ingest(a: IngestArgs, run: &mut Run) -> Result<()> {
    let mut s = Settings::load("ingest", a.common.config.as_deref())?;
    run.start(&a.common, &s)?;
    let d = SplitRatios::default();
    let ratios = SplitRatios {
        train: s.pick("train_fraction", a.train_fraction, d.train)?,
        dev: s.pick("dev_fraction", a.dev_fraction, d.dev)?,
        test: s.pick("test_fraction", a.test_fraction, d.test)?,
    };
    let seed = s.pick("seed", a.seed, 0)?;
    finish_settings(run, s, Some(seed));
    run.input(&a.corpus);
    let docs = load_corpus(&a.corpus)?;
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let split = split_corpus(&docs, ratios, seed)?;
    split.write(run.out.as_ref().expect("started"))?;
    for f in ["train.jsonl", "dev.jsonl", "test.jsonl", "split.json"] {
        run.output(f);
    }
    let ineligible = docs.iter().filter(|d| !d.is_eligible()).count();
    println!(
        "{} documents ({} ineligible): train {}, dev {}, test {}",
        docs.len(),
        ineligible,
        split.train.len(),
        split.dev.len(),
        split.test.len()
    );
    Ok(())
}

/// Human-readable tree: one line per node, indented by level.
pub fn topic_report(state: &HldaState, vocab: &Vocabulary, level: usize, top: usize) -> Result<String> {
    let mut out = format!(
        "iterations {}, depth {}, nodes {}, log-likelihood {:.4}\n",
        state.iteration(),
        state.depth(),
        state.num_topics(),
        state.log_likelihood()
    );
    match state.select_prompt_topics(level) {
        Ok(ks) => out += &format!("prompt topics (level {level}): {ks:?}\n"),
        Err(e) => out += &format!("prompt topics (level {level}): unavailable, {e}\n"),
    }
    let mut stack = vec![state.root().id];
    while let Some(id) = stack.pop() {
        let node = state.node(id).ok_or(Error::UnknownTopic(id))?;
        let words = state.top_words(id, top)?;
        let text: Vec<&str> = words.words.iter().filter_map(|&w| vocab.token(w)).collect();
        out += &format!("{}node {} level {} docs {}: {}\n", "  ".repeat(node.level), id, node.level, node.customers, text.join(" "));
        stack.extend(node.children.iter().rev());
    }
    Ok(out)
}

fn topics(a: TopicsArgs, run: &mut Run) -> Result<()> {
    let mut s = Settings::load("topics", a.common.config.as_deref())?;
    run.start(&a.common, &s)?;
    let d = HldaConfig::default();
    let cfg = HldaConfig {
        depth: s.pick("depth", a.depth, d.depth)?,
        iterations: s.pick("iters", a.iters, d.iterations)?,
        seed: s.pick("seed", a.seed, d.seed)?,
        alpha: s.pick("alpha", a.alpha, d.alpha)?,
        eta: s.pick("eta", a.eta, d.eta)?,
        crp_gamma: s.pick("gamma", a.gamma, d.crp_gamma)?,
    };
    let min_count = s.pick("min_count", a.min_count, 1)?;
    let level = s.pick("level", a.level, PromptConfig::default().level)?;
    let top = s.pick("top_words", a.top_words, PromptConfig::default().top_words)?;
    finish_settings(run, s, Some(cfg.seed));
    run.input(&a.corpus);
    let docs: Vec<Document> = load_corpus(&a.corpus)?.into_iter().filter(Document::is_eligible).collect();
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let vocab = Vocabulary::build(&docs, min_count)?;
    let state = fit_hlda(&docs, &vocab, cfg)?;
    save_checkpoint(run.output(TOPICS_FILE), &vocab, &state)?;
    let report = topic_report(&state, &vocab, level, top)?;
    let path = run.output("report.txt");
    fs::write(&path, &report).map_err(|e| Error::io(&path, e))?;
    print!("{report}");
    Ok(())
}

fn train(a: TrainArgs, run: &mut Run) -> Result<()> {
    let mut s = Settings::load("train", a.common.config.as_deref())?;
    run.start(&a.common, &s)?;
    let td = TrainConfig::default();
    let mode = s.pick("mode", a.mode, td.mode)?;
    let config = TrainConfig {
        mode,
        freeze_encoder: s.switch("freeze_encoder", a.freeze_encoder)?,
        seed: s.pick("seed", a.seed, td.seed)?,
        batch_size: s.pick("batch_size", a.batch_size, td.batch_size)?,
        epochs: s.pick("epochs", a.epochs, td.epochs)?,
        learning_rate: s.pick("learning_rate", a.learning_rate, td.learning_rate)?,
        beta1: s.pick("beta1", a.beta1, td.beta1)?,
        beta2: s.pick("beta2", a.beta2, td.beta2)?,
        epsilon: s.pick("epsilon", a.epsilon, td.epsilon)?,
        clip_norm: s.pick("clip_norm", a.clip_norm, td.clip_norm)?,
        warmup_steps: s.pick("warmup_steps", a.warmup_steps, td.warmup_steps)?,
        patience: s.pick("patience", a.patience, td.patience)?,
        early_stop_k: s.pick("early_stop_k", a.early_stop_k, td.early_stop_k)?,
        topic_encode_cap: s.pick("topic_encode_cap", a.topic_encode_cap, td.topic_encode_cap)?,
        loss: crate::objectives::LossConfig {
            temperature: s.pick("temperature", a.temperature, td.loss.temperature)?,
            margin: s.pick("margin", a.margin, td.loss.margin)?,
            alpha: s.pick("alpha", a.alpha, td.loss.alpha)?,
        },
    };
    let ed = EncoderConfig::new(0);
    let dim = s.pick("dim", a.dim, ed.dim)?;
    let enc_shape = (
        dim,
        s.pick("layers", a.layers, ed.num_layers)?,
        s.pick("heads", a.heads, ed.heads)?,
        s.pick("ff_dim", a.ff_dim, 4 * dim)?,
        s.pick("max_len", a.max_len, ed.max_len)?,
    );
    let pd = PromptConfig::default();
    let prompt_cfg = PromptConfig {
        prompt_len: s.pick("prompt_len", a.prompt_len, pd.prompt_len)?,
        depth: s.pick("prompt_depth", a.prompt_depth, pd.depth)?,
        top_words: s.pick("top_words", a.top_words, pd.top_words)?,
        level: s.pick("level", a.level, pd.level)?,
    };
    let min_count = s.pick("min_count", a.min_count, 1)?;
    let max_steps: Option<u64> = match a.max_steps {
        Some(m) => Some(m),
        None => s.from_file("max_steps")?,
    };
    s.effective.insert("max_steps".into(), serde_json::to_value(max_steps)?);
    finish_settings(run, s, Some(config.seed));

    run.input(&a.train);
    let out = run.out.clone().expect("started");
    let train_docs = load_corpus(&a.train)?;
    let dev_docs = match &a.dev {
        Some(p) => {
            run.input(p);
            Some(load_corpus(p)?)
        }
        None => None,
    };
    let topic_model = match &a.topics {
        Some(p) => {
            run.input(p);
            let (vocab, state) = load_checkpoint(p)?;
            Some((vocab, state, file_hash(p)?))
        }
        None if mode != Mode::NoPrompt => {
            return Err(Error::InvalidArgument(format!("mode {mode} needs --topics")));
        }
        None => None,
    };
    let vocab = match &topic_model {
        Some((v, _, _)) => v.clone(),
        None => {
            let eligible: Vec<Document> = train_docs.iter().filter(|d| d.is_eligible()).cloned().collect();
            Vocabulary::build(&eligible, min_count)?
        }
    };

    let mut trainer = if a.resume {
        let t = Trainer::load(&out)?;
        if t.config != config {
            return Err(Error::Checkpoint("resume settings differ from the stored training configuration".into()));
        }
        t
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let enc_cfg = EncoderConfig {
            dim: enc_shape.0,
            num_layers: enc_shape.1,
            heads: enc_shape.2,
            ff_dim: enc_shape.3,
            max_len: enc_shape.4,
            vocab_size: vocab.len(),
        };
        let encoder = EncoderParams::init(enc_cfg, &mut rng)?;
        let bank = match (&topic_model, mode) {
            (_, Mode::NoPrompt) => None,
            (Some((_, state, hash)), _) => Some(PromptBank::build(state, &encoder, prompt_cfg, Some(hash.clone()), &mut rng)?),
            (None, _) => unreachable!("checked above"),
        };
        Trainer::new(Model::new(encoder, bank), config)?
    };

    let state_ref = topic_model.as_ref().map(|(_, s, _)| (s, &vocab));
    let router = PromptRouter::new(mode, &trainer.model, state_ref)?;
    let examples = training_examples(&train_docs, &vocab, &router)?;
    let dev = match &dev_docs {
        Some(d) => Some(EvalSet::from_documents(d, &vocab, &router)?),
        None => None,
    };
    write_json(&run.output(VOCAB_FILE), &vocab)?;
    if let Some(p) = &a.topics {
        let dest = run.output(TOPICS_FILE);
        fs::copy(p, &dest).map_err(|e| Error::io(&dest, e))?;
    }
    for f in ["config.json", "params.bin", "optimizer.bin", "history.jsonl"] {
        run.output(f);
    }
    let outcome = trainer.run(&examples, dev.as_ref(), max_steps, Some(&out))?;
    println!("steps {} epochs {} stopped_early {}", outcome.steps, outcome.epochs, outcome.stopped_early);
    if let Some(r) = outcome.last_dev {
        println!("dev acc {:?} mrr {:?} map {:?}", r.acc, r.mrr, r.map);
    }
    Ok(())
}

/// A trained checkpoint with the vocabulary and topic model it was built on.
pub struct LoadedRun {
    pub trainer: Trainer,
    pub vocab: Vocabulary,
    pub topics: Option<HldaState>,
}

impl LoadedRun {
    pub fn load(dir: &Path) -> Result<Self> {
        let trainer = Trainer::load(dir)?;
        let vocab: Vocabulary = read_json(&dir.join(VOCAB_FILE))?;
        if vocab.len() != trainer.model.encoder.config.vocab_size {
            return Err(Error::Checkpoint("vocab.json size differs from the encoder vocabulary".into()));
        }
        let path = dir.join(TOPICS_FILE);
        let topics = if path.exists() {
            let expected = trainer.model.prompts.as_ref().and_then(|b| b.topic_checkpoint.clone());
            if let Some(h) = expected {
                if file_hash(&path)? != h {
                    return Err(Error::Checkpoint("topics.json does not match the topic model the prompts were built from".into()));
                }
            }
            Some(load_checkpoint(&path)?.1)
        } else {
            None
        };
        Ok(Self { trainer, vocab, topics })
    }

    pub fn router(&self) -> Result<PromptRouter<'_>> {
        PromptRouter::new(self.trainer.config.mode, &self.trainer.model, self.topics.as_ref().map(|s| (s, &self.vocab)))
    }

    pub fn eval_set(&self, docs: &[Document]) -> Result<EvalSet> {
        EvalSet::from_documents(docs, &self.vocab, &self.router()?)
    }
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    checkpoint_hash: String,
    index: DenseIndex,
}

fn checkpoint_hash(dir: &Path) -> Result<String> {
    file_hash(dir.join("params.bin"))
}

fn index(a: IndexArgs, run: &mut Run) -> Result<()> {
    let s = Settings::load("index", a.common.config.as_deref())?;
    run.start(&a.common, &s)?;
    finish_settings(run, s, None);
    run.input(&a.checkpoint);
    run.input(&a.corpus);
    let loaded = LoadedRun::load(&a.checkpoint)?;
    let docs = load_corpus(&a.corpus)?;
    let set = loaded.eval_set(&docs)?;
    let index = build_index(&loaded.trainer.model, &set.passages)?;
    let n = index.len();
    write_json(&run.output(INDEX_FILE), &IndexFile { checkpoint_hash: checkpoint_hash(&a.checkpoint)?, index })?;
    println!("indexed {n} passages");
    Ok(())
}

fn search(a: SearchArgs, run: &mut Run) -> Result<()> {
    let mut s = Settings::load("search", a.common.config.as_deref())?;
    run.start(&a.common, &s)?;
    let k = s.pick("k", a.k, 10)?;
    finish_settings(run, s, None);
    run.input(&a.checkpoint);
    run.input(&a.index);
    let loaded = LoadedRun::load(&a.checkpoint)?;
    let file: IndexFile = read_json(&a.index.join(INDEX_FILE))?;
    if file.checkpoint_hash != checkpoint_hash(&a.checkpoint)? {
        return Err(Error::Checkpoint("index was built with a different checkpoint".into()));
    }
    let tokens = tokenize(&a.query);
    let text = EvalText {
        id: "query".into(),
        categories: Default::default(),
        tokens: loaded.vocab.encode(&tokens),
        prompt: loaded.router()?.for_text("query", &tokens)?,
    };
    let vector = encode_texts(&loaded.trainer.model, std::slice::from_ref(&text))?.remove(0);
    let list = file.index.search("query", &vector, k)?;
    crate::retrieval::write_ranked_tsv(run.output("results.tsv"), std::slice::from_ref(&list))?;
    for (rank, (id, score)) in list.results.iter().enumerate() {
        println!("{}\t{id}\t{score:.6}", rank + 1);
    }
    Ok(())
}

fn eval(a: EvalArgs, run: &mut Run) -> Result<()> {
    let mut s = Settings::load("eval", a.common.config.as_deref())?;
    run.start(&a.common, &s)?;
    let ks = s.pick("k", a.k, vec![1, 10, 50])?;
    let filter_self = s.switch("filter_self", a.filter_self)?;
    let bm25 = s.switch("bm25", a.bm25)?;
    let d = Bm25Params::default();
    let params = Bm25Params { k1: s.pick("k1", a.k1, d.k1)?, b: s.pick("b", a.b, d.b)? };
    finish_settings(run, s, None);
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidArgument("cutoffs must be positive".into()));
    }
    run.input(&a.corpus);
    let docs: Vec<Document> = load_corpus(&a.corpus)?.into_iter().filter(Document::is_eligible).collect();
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let depth = ks.iter().copied().max().unwrap_or(1) + usize::from(filter_self);
    let (lists, judge) = if bm25 {
        let passages: Vec<(String, Vec<String>)> = docs.iter().map(|d| (d.id.clone(), d.abstract_text.clone())).collect();
        let index = Bm25Index::new(&passages)?;
        let lists = docs.iter().map(|d| index.search(&d.id, &d.title, depth, params)).collect::<Result<Vec<RankedList>>>()?;
        let judge = RelevanceJudge::new(docs.iter().map(|d| (d.id.as_str(), &d.categories)), docs.iter().map(|d| (d.id.as_str(), &d.categories)));
        (lists, judge)
    } else {
        let dir = a.checkpoint.as_ref().ok_or_else(|| Error::InvalidArgument("eval needs --checkpoint unless --bm25 is given".into()))?;
        run.input(dir);
        let loaded = LoadedRun::load(dir)?;
        let set = loaded.eval_set(&docs)?;
        let index = build_index(&loaded.trainer.model, &set.passages)?;
        let queries = encode_texts(&loaded.trainer.model, &set.queries)?;
        let lists = set.queries.iter().zip(&queries).map(|(q, v)| index.search(&q.id, v, depth)).collect::<Result<Vec<_>>>()?;
        (lists, set.judge())
    };
    let report = compute_metrics(&lists, &judge, &ks, filter_self)?;
    write_json(&run.output("metrics.json"), &report)?;
    crate::retrieval::write_ranked_tsv(run.output("ranked.tsv"), &lists)?;
    for k in &ks {
        println!("@{k}: acc {:.4} mrr {:.4} map {:.4}", report.acc[k], report.mrr[k], report.map.get(k).copied().unwrap_or(f64::NAN));
    }
    Ok(())
}

fn diagnose_cmd(a: DiagnoseArgs, run: &mut Run) -> Result<()> {
    let mut s = Settings::load("diagnose", a.common.config.as_deref())?;
    run.start(&a.common, &s)?;
    let samples = s.pick("samples", a.samples, DEFAULT_NEGATIVE_SAMPLES)?;
    let seed = s.pick("seed", a.seed, 0)?;
    let label = s.pick("label", a.label, "category".to_string())?;
    finish_settings(run, s, Some(seed));
    if label != "category" && label != "topic" {
        return Err(Error::InvalidArgument(format!("label must be `category` or `topic`, got {label:?}")));
    }
    run.input(&a.checkpoint);
    run.input(&a.corpus);
    let loaded = LoadedRun::load(&a.checkpoint)?;
    let docs = load_corpus(&a.corpus)?;
    let set = loaded.eval_set(&docs)?;
    let model = &loaded.trainer.model;
    let q = encode_texts(model, &set.queries)?;
    let p = encode_texts(model, &set.passages)?;
    let qr: Vec<&[f64]> = q.iter().map(Vec::as_slice).collect();
    let pr: Vec<&[f64]> = p.iter().map(Vec::as_slice).collect();
    let rel = |i: usize, j: usize| {
        let (x, y) = (&set.queries[i], &set.passages[j]);
        relevance(&x.id, &x.categories, &y.id, &y.categories)
    };
    let report = diagnose(&qr, &pr, rel, samples, seed)?;
    write_json(&run.output("diagnostics.json"), &report)?;

    let labels = |texts: &[EvalText], field: fn(&Document) -> &Vec<String>| -> Result<Vec<String>> {
        if label == "category" {
            return Ok(texts.iter().map(|t| t.categories.iter().cloned().collect::<Vec<_>>().join("+")).collect());
        }
        let state = loaded.topics.as_ref().ok_or_else(|| Error::InvalidArgument("topic labels need a checkpoint trained with --topics".into()))?;
        let level = model.prompts.as_ref().map_or(1, |b| b.config.level);
        let router = PromptRouter::from_topic_model(state, &loaded.vocab, level)?;
        let PromptRouter::Topics { topics, .. } = &router else { unreachable!("topic router") };
        let by_id: BTreeMap<&str, &Document> = docs.iter().map(|d| (d.id.as_str(), d)).collect();
        texts
            .iter()
            .map(|t| {
                let k = router.for_text(&t.id, field(by_id[t.id.as_str()]))?.expect("topic routing assigns a prompt");
                Ok(format!("topic{}", topics[k]))
            })
            .collect()
    };
    let ql = labels(&set.queries, |d| &d.title)?;
    let pl = labels(&set.passages, |d| &d.abstract_text)?;
    let ids: Vec<String> = set.queries.iter().map(|t| t.id.clone()).collect();
    export_embeddings(run.output("queries.tsv"), &ids, &ql, &q)?;
    export_embeddings(run.output("passages.tsv"), &ids, &pl, &p)?;
    println!(
        "alignment {:.4} uniformity(q) {:.4} uniformity(p) {:.4} sim+ {:.4} sim- {:.4}",
        report.alignment, report.uniformity_queries, report.uniformity_passages, report.similarity.positive, report.similarity.negative
    );
    Ok(())
}
