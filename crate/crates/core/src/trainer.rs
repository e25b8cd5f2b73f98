//! Seeded fine-tuning loop, prompt routing, dev evaluation and checkpoint
//! directories.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Var;
use crate::corpus::{Document, Vocabulary};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::{loss_total_on_tape, mine_in_batch, LossConfig};
use crate::optim::{clip_gradients, Adam, AdamConfig};
use crate::prompt_bank::{PrefixMatrix, PromptBank, PromptConfig, PromptEncoderParams, ResidualBlock};
use crate::retrieval::{compute_metrics, DenseIndex, MetricsReport, PassageEntry, RankedList, RelevanceJudge};
use crate::tensor::Matrix;
use crate::topic_model::{HldaState, TopicWordSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    TopicPrompts,
    SinglePrompt,
    NoPrompt,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::TopicPrompts => "topic_prompts",
            Mode::SinglePrompt => "single_prompt",
            Mode::NoPrompt => "no_prompt",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topic_prompts" => Ok(Mode::TopicPrompts),
            "single_prompt" => Ok(Mode::SinglePrompt),
            "no_prompt" => Ok(Mode::NoPrompt),
            other => Err(Error::InvalidArgument(format!("unknown mode {other:?}; expected topic_prompts, single_prompt or no_prompt"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    /// Linear warmup length in steps; 0 disables it.
    pub warmup_steps: usize,
    pub seed: u64,
    pub mode: Mode,
    pub freeze_encoder: bool,
    pub loss: LossConfig,
    /// Upper bound on abstracts × prompts encoded for the topic loss per step.
    pub topic_encode_cap: usize,
    /// Dev evaluations without MRR improvement before stopping; 0 disables.
    pub patience: usize,
    /// Cutoff whose MRR drives early stopping.
    pub early_stop_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 10,
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 1.0,
            warmup_steps: 0,
            seed: 0,
            mode: Mode::TopicPrompts,
            freeze_encoder: false,
            loss: LossConfig::default(),
            topic_encode_cap: 256,
            patience: 3,
            early_stop_k: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidArgument(format!("clip norm must be positive, got {}", self.clip_norm)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("moment coefficients must lie in [0, 1) and epsilon be positive".into()));
        }
        self.loss.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, epsilon: self.epsilon }
    }
}

/// Chooses the prompt for a text according to the training mode.
pub enum PromptRouter<'a> {
    None,
    Single,
    Topics { state: &'a HldaState, vocab: &'a Vocabulary, topics: Vec<usize> },
}

impl<'a> PromptRouter<'a> {
    pub fn new(mode: Mode, model: &Model, topics: Option<(&'a HldaState, &'a Vocabulary)>) -> Result<Self> {
        match mode {
            Mode::NoPrompt => Ok(PromptRouter::None),
            Mode::SinglePrompt => Ok(PromptRouter::Single),
            Mode::TopicPrompts => {
                let bank = model.prompts.as_ref().ok_or_else(|| Error::InvalidArgument("topic prompts need a prompt bank".into()))?;
                let (state, vocab) = topics.ok_or_else(|| Error::InvalidArgument("topic prompts need a fitted topic model".into()))?;
                Ok(PromptRouter::Topics { state, vocab, topics: bank.topics.clone() })
            }
        }
    }

    /// Topic routing without a prompt bank, over the level-`level` topics.
    pub fn from_topic_model(state: &'a HldaState, vocab: &'a Vocabulary, level: usize) -> Result<Self> {
        Ok(PromptRouter::Topics { state, vocab, topics: state.select_prompt_topics(level)? })
    }

    /// Top `count` words of the topic each document field is routed to, as
    /// `(title lists, abstract lists)` keyed by document id. Fitted documents
    /// use their own topic for both fields.
    pub fn topic_word_lists(&self, docs: &[Document], count: usize) -> Result<(BTreeMap<String, Vec<String>>, BTreeMap<String, Vec<String>>)> {
        let PromptRouter::Topics { state, vocab, topics } = self else {
            return Err(Error::InvalidArgument("topic word lists need topic routing".into()));
        };
        let words = |prompt: Option<usize>| -> Result<Vec<String>> {
            let topic = topics[prompt.expect("topic routing always assigns a prompt")];
            let set = state.top_words(topic, count)?;
            Ok(set.words.iter().filter_map(|&w| vocab.token(w)).map(str::to_string).collect())
        };
        let (mut title, mut abstract_text) = (BTreeMap::new(), BTreeMap::new());
        for d in docs {
            let (t, a) = if state.document(&d.id).is_ok() {
                let w = words(self.for_document(d)?)?;
                (w.clone(), w)
            } else {
                (words(self.for_text(&d.id, &d.title)?)?, words(self.for_text(&d.id, &d.abstract_text)?)?)
            };
            title.insert(d.id.clone(), t);
            abstract_text.insert(d.id.clone(), a);
        }
        Ok((title, abstract_text))
    }

    /// Prompt of a whole document: its fitted distribution when the topic
    /// model saw it, otherwise a fold-in of all its words.
    pub fn for_document(&self, doc: &Document) -> Result<Option<usize>> {
        match self {
            PromptRouter::None => Ok(None),
            PromptRouter::Single => Ok(Some(0)),
            PromptRouter::Topics { state, vocab, topics } => {
                crate::prompt_bank::assign_prompt(&state.infer_distribution(doc, vocab), topics).map(Some)
            }
        }
    }

    /// Prompt of a standalone text from its expected topic proportions.
    pub fn for_text(&self, id: &str, tokens: &[String]) -> Result<Option<usize>> {
        match self {
            PromptRouter::None => Ok(None),
            PromptRouter::Single => Ok(Some(0)),
            PromptRouter::Topics { state, vocab, topics } => {
                let words: Vec<u32> = tokens.iter().filter_map(|t| vocab.get(t)).collect();
                crate::prompt_bank::assign_prompt(&state.expected_distribution(id, &words), topics).map(Some)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub id: String,
    pub categories: BTreeSet<String>,
    pub title: Vec<u32>,
    pub abstract_ids: Vec<u32>,
    pub prompt: Option<usize>,
}

pub fn training_examples(docs: &[Document], vocab: &Vocabulary, router: &PromptRouter<'_>) -> Result<Vec<TrainExample>> {
    docs.iter()
        .filter(|d| d.is_eligible())
        .map(|d| {
            Ok(TrainExample {
                id: d.id.clone(),
                categories: d.categories.clone(),
                title: vocab.encode(&d.title),
                abstract_ids: vocab.encode(&d.abstract_text),
                prompt: router.for_document(d)?,
            })
        })
        .collect()
}

/// A text ready for encoding at evaluation time.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalText {
    pub id: String,
    pub categories: BTreeSet<String>,
    pub tokens: Vec<u32>,
    pub prompt: Option<usize>,
}

/// Titles as queries and abstracts as passages. Each side is routed to a
/// prompt from its own words.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub queries: Vec<EvalText>,
    pub passages: Vec<EvalText>,
}

impl EvalSet {
    pub fn from_documents(docs: &[Document], vocab: &Vocabulary, router: &PromptRouter<'_>) -> Result<Self> {
        let docs: Vec<&Document> = docs.iter().filter(|d| d.is_eligible()).collect();
        if docs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let text = |d: &Document, tokens: &[String]| -> Result<EvalText> {
            Ok(EvalText { id: d.id.clone(), categories: d.categories.clone(), tokens: vocab.encode(tokens), prompt: router.for_text(&d.id, tokens)? })
        };
        Ok(Self {
            queries: docs.iter().map(|d| text(d, &d.title)).collect::<Result<_>>()?,
            passages: docs.iter().map(|d| text(d, &d.abstract_text)).collect::<Result<_>>()?,
        })
    }

    pub fn judge(&self) -> RelevanceJudge {
        RelevanceJudge::new(
            self.queries.iter().map(|q| (q.id.as_str(), &q.categories)),
            self.passages.iter().map(|p| (p.id.as_str(), &p.categories)),
        )
    }
}

pub fn encode_texts(model: &Model, texts: &[EvalText]) -> Result<Vec<Vec<f64>>> {
    let inputs: Vec<(&[u32], Option<usize>)> = texts.iter().map(|t| (t.tokens.as_slice(), t.prompt)).collect();
    Ok(model.encode_batch(&inputs)?.into_iter().map(|(v, _)| v).collect())
}

pub fn build_index(model: &Model, passages: &[EvalText]) -> Result<DenseIndex> {
    let reps = encode_texts(model, passages)?;
    DenseIndex::build(
        passages
            .iter()
            .zip(reps)
            .map(|(p, v)| PassageEntry { id: p.id.clone(), categories: p.categories.clone(), vector: v })
            .collect(),
    )
}

/// Ranks every passage for every query and scores the rankings; parameters
/// are only read.
pub fn evaluate_dev(model: &Model, set: &EvalSet, ks: &[usize], filter_self: bool) -> Result<(Vec<RankedList>, MetricsReport)> {
    if set.queries.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let index = build_index(model, &set.passages)?;
    let queries = encode_texts(model, &set.queries)?;
    let depth = ks.iter().copied().max().unwrap_or(1) + usize::from(filter_self);
    let lists = set.queries.iter().zip(&queries).map(|(q, v)| index.search(&q.id, v, depth)).collect::<Result<Vec<_>>>()?;
    let report = compute_metrics(&lists, &set.judge(), ks, filter_self)?;
    Ok((lists, report))
}

/// Loss terms of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub query_passage: f64,
    pub query_query: f64,
    pub topic: Option<f64>,
    pub active_query_passage: usize,
    pub active_query_query: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_qp: f64,
    pub loss_qq: f64,
    pub loss_topic: f64,
    pub active_qp: usize,
    pub active_qq: usize,
    pub prompts_in_batch: usize,
    pub grad_norm: f64,
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum HistoryRecord {
    Step(StepRecord),
    /// Metric maps are keyed by the cutoff as a string: integer keys do not
    /// survive the tagged-enum round trip.
    Eval { step: u64, epoch: usize, acc: BTreeMap<String, f64>, mrr: BTreeMap<String, f64>, map: BTreeMap<String, f64> },
    Halt { step: u64, reason: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub step: u64,
    pub epoch: usize,
    pub batch_in_epoch: usize,
    pub best_dev_mrr: Option<f64>,
    pub stale_evals: usize,
    pub stopped: bool,
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub optimizer: Adam,
    pub progress: Progress,
    pub history: Vec<HistoryRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub steps: u64,
    pub epochs: usize,
    pub stopped_early: bool,
    pub last_dev: Option<MetricsReport>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        match config.mode {
            Mode::TopicPrompts if model.num_prompts() < 2 => {
                return Err(Error::InvalidArgument(format!("topic prompts need at least 2 prompts, the bank has {}", model.num_prompts())));
            }
            Mode::SinglePrompt if model.num_prompts() < 1 => {
                return Err(Error::InvalidArgument("single-prompt mode needs a prompt bank".into()));
            }
            Mode::NoPrompt if model.prompts.is_some() => {
                return Err(Error::InvalidArgument("no-prompt mode takes a model without a prompt bank".into()));
            }
            Mode::NoPrompt if config.freeze_encoder => {
                return Err(Error::InvalidArgument("freezing the encoder without prompts leaves nothing to train".into()));
            }
            _ => {}
        }
        let optimizer = Adam::new(model.tensors().into_iter().map(|(_, t)| t));
        Ok(Self { model, config, optimizer, progress: Progress::default(), history: Vec::new() })
    }

    /// Per-tensor update flags in [`Model::tensors`] order.
    pub fn trainable(&self) -> Vec<bool> {
        let n_enc = self.model.encoder_tensor_count();
        (0..self.model.tensors().len()).map(|i| !(self.config.freeze_encoder && i < n_enc)).collect()
    }

    fn rng(&self, stream: u64, counter: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(stream);
        rng.set_word_pos(u128::from(counter) << 20);
        rng
    }

    /// Batches of example indices for `epoch`: each prompt group is shuffled,
    /// then groups are interleaved round-robin and cut into batches. A final
    /// batch of one example is dropped.
    pub fn epoch_batches(&self, examples: &[TrainExample], epoch: usize) -> Vec<Vec<usize>> {
        let mut rng = self.rng(1, epoch as u64);
        let mut groups: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
        for (i, e) in examples.iter().enumerate() {
            groups.entry(e.prompt).or_default().push(i);
        }
        let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
        for g in &mut groups {
            g.shuffle(&mut rng);
        }
        groups.shuffle(&mut rng);
        let mut order = Vec::with_capacity(examples.len());
        let longest = groups.iter().map(Vec::len).max().unwrap_or(0);
        for i in 0..longest {
            order.extend(groups.iter().filter_map(|g| g.get(i)));
        }
        order.chunks(self.config.batch_size).filter(|c| c.len() >= 2).map(<[usize]>::to_vec).collect()
    }

    /// Loss of the batch `indices` and its gradient for every tensor in
    /// [`Model::tensors`] order. Parameters are only read.
    pub fn loss_and_gradient(&self, examples: &[TrainExample], indices: &[usize]) -> Result<(BatchLoss, Vec<Matrix>)> {
        let batch: Vec<&TrainExample> = indices.iter().map(|&i| &examples[i]).collect();
        let items: Vec<(&str, &BTreeSet<String>)> = batch.iter().map(|e| (e.id.as_str(), &e.categories)).collect();
        let mined = mine_in_batch(&items)?;
        let mode = self.config.mode;
        if mode == Mode::TopicPrompts && batch.iter().any(|e| e.prompt.is_none()) {
            return Err(Error::InvalidArgument("every example needs a prompt in topic-prompt mode".into()));
        }
        let ks = if mode == Mode::TopicPrompts { self.model.num_prompts() } else { 0 };
        // Abstracts encoded under every prompt for the topic loss.
        let topic_subset: Vec<usize> = if ks >= 2 {
            let room = (self.config.topic_encode_cap / ks).max(1);
            let mut all: Vec<usize> = (0..batch.len()).collect();
            if all.len() > room {
                all.shuffle(&mut self.rng(2, self.progress.step));
                all.truncate(room);
                all.sort_unstable();
            }
            all
        } else {
            Vec::new()
        };
        let loss_cfg = self.config.loss;
        let mut parts = BatchLoss::default();
        let (total, grads) = self.model.value_and_gradient(|tape, bound| {
            let mut qs = Vec::with_capacity(batch.len());
            let mut ps = Vec::with_capacity(batch.len());
            for e in &batch {
                qs.push(bound.encode(tape, &e.title, self.prompt_of(e))?);
                ps.push(bound.encode(tape, &e.abstract_ids, self.prompt_of(e))?);
            }
            let topic_reps: Option<Vec<Var>> = if ks >= 2 {
                let mut per_prompt = Vec::with_capacity(ks);
                for k in 0..ks {
                    let mut rows = Vec::with_capacity(topic_subset.len());
                    for &i in &topic_subset {
                        rows.push(if batch[i].prompt == Some(k) { ps[i] } else { bound.encode(tape, &batch[i].abstract_ids, Some(k))? });
                    }
                    per_prompt.push(tape.vstack(&rows)?);
                }
                Some(per_prompt)
            } else {
                None
            };
            let q = tape.vstack(&qs)?;
            let p = tape.vstack(&ps)?;
            let lv = loss_total_on_tape(tape, &mined, q, p, topic_reps.as_deref(), &loss_cfg)?;
            parts = BatchLoss {
                total: 0.0,
                query_passage: tape.scalar(lv.query_passage),
                query_query: tape.scalar(lv.query_query),
                topic: lv.topic.map(|t| tape.scalar(t)),
                active_query_passage: lv.active_query_passage,
                active_query_query: lv.active_query_query,
            };
            Ok(lv.total)
        })?;
        parts.total = total;
        Ok((parts, grads))
    }

    fn prompt_of(&self, e: &TrainExample) -> Option<usize> {
        match self.config.mode {
            Mode::NoPrompt => None,
            Mode::SinglePrompt => Some(0),
            Mode::TopicPrompts => e.prompt,
        }
    }

    /// One optimizer step on the batch `indices`.
    pub fn step(&mut self, examples: &[TrainExample], indices: &[usize]) -> Result<StepRecord> {
        let (parts, mut grads) = self.loss_and_gradient(examples, indices)?;
        if !parts.total.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", self.progress.step + 1)));
        }
        let trainable = self.trainable();
        let grad_norm = clip_gradients(&mut grads, &trainable, self.config.clip_norm);
        let lr = if self.config.warmup_steps > 0 {
            self.config.learning_rate * ((self.progress.step + 1) as f64 / self.config.warmup_steps as f64).min(1.0)
        } else {
            self.config.learning_rate
        };
        let adam = self.config.adam();
        self.optimizer.update(self.model.tensors_mut(), &grads, &trainable, &adam, lr)?;
        if let Some((name, _)) = self.model.tensors().into_iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {name} after step {}", self.progress.step + 1)));
        }
        self.progress.step += 1;
        let prompts: BTreeSet<Option<usize>> = indices.iter().map(|&i| self.prompt_of(&examples[i])).collect();
        let record = StepRecord {
            step: self.progress.step,
            epoch: self.progress.epoch,
            loss_total: parts.total,
            loss_qp: parts.query_passage,
            loss_qq: parts.query_query,
            loss_topic: parts.topic.unwrap_or(0.0),
            active_qp: parts.active_query_passage,
            active_qq: parts.active_query_query,
            prompts_in_batch: prompts.len(),
            grad_norm,
            clipped: grad_norm > self.config.clip_norm,
        };
        log::info!(target: "train", "{}", serde_json::to_string(&HistoryRecord::Step(record.clone()))?);
        self.history.push(HistoryRecord::Step(record.clone()));
        Ok(record)
    }

    /// Trains until the configured epochs are done, early stopping triggers,
    /// or `max_steps` more steps have run. A non-finite loss halts training;
    /// with a checkpoint directory the state at the halt is written there.
    pub fn run(&mut self, examples: &[TrainExample], dev: Option<&EvalSet>, max_steps: Option<u64>, checkpoint: Option<&Path>) -> Result<TrainOutcome> {
        if examples.len() < 2 {
            return Err(Error::InvalidArgument(format!("training needs at least 2 eligible documents, got {}", examples.len())));
        }
        let start = self.progress.step;
        let mut last_dev = None;
        'epochs: while !self.progress.stopped && self.progress.epoch < self.config.epochs {
            let batches = self.epoch_batches(examples, self.progress.epoch);
            while self.progress.batch_in_epoch < batches.len() {
                if max_steps.is_some_and(|m| self.progress.step - start >= m) {
                    break 'epochs;
                }
                let b = &batches[self.progress.batch_in_epoch];
                if let Err(e) = self.step(examples, b) {
                    if e.is_numerical() {
                        self.history.push(HistoryRecord::Halt { step: self.progress.step, reason: e.to_string() });
                        if let Some(dir) = checkpoint {
                            self.save(dir)?;
                        }
                    }
                    return Err(e);
                }
                self.progress.batch_in_epoch += 1;
            }
            if let Some(set) = dev {
                let (_, report) = evaluate_dev(&self.model, set, &[1, self.config.early_stop_k], false)?;
                let mrr = report.mrr[&self.config.early_stop_k];
                let rec = HistoryRecord::Eval {
                    step: self.progress.step,
                    epoch: self.progress.epoch,
                    acc: by_cutoff(&report.acc),
                    mrr: by_cutoff(&report.mrr),
                    map: by_cutoff(&report.map),
                };
                log::info!(target: "train", "{}", serde_json::to_string(&rec)?);
                self.history.push(rec);
                if self.progress.best_dev_mrr.is_none_or(|b| mrr > b) {
                    self.progress.best_dev_mrr = Some(mrr);
                    self.progress.stale_evals = 0;
                } else {
                    self.progress.stale_evals += 1;
                    if self.config.patience > 0 && self.progress.stale_evals >= self.config.patience {
                        self.progress.stopped = true;
                    }
                }
                last_dev = Some(report);
            }
            self.progress.epoch += 1;
            self.progress.batch_in_epoch = 0;
        }
        if let Some(dir) = checkpoint {
            self.save(dir)?;
        }
        Ok(self.outcome(last_dev))
    }

    fn outcome(&self, last_dev: Option<MetricsReport>) -> TrainOutcome {
        TrainOutcome { steps: self.progress.step, epochs: self.progress.epoch, stopped_early: self.progress.stopped, last_dev }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let record = CheckpointConfig::from_trainer(self);
        let path = dir.join("config.json");
        write_bytes(&path, &serde_json::to_vec_pretty(&record)?)?;
        let tensors = self.model.tensors();
        write_tensors(&dir.join("params.bin"), PARAMS_MAGIC, 0, tensors.iter().map(|(n, t)| (n.as_str(), *t)))?;
        let names: Vec<String> = tensors.iter().map(|(n, _)| n.clone()).collect();
        let moments = names
            .iter()
            .map(|n| format!("m.{n}"))
            .zip(&self.optimizer.first)
            .chain(names.iter().map(|n| format!("v.{n}")).zip(&self.optimizer.second))
            .collect::<Vec<_>>();
        write_tensors(&dir.join("optimizer.bin"), OPTIMIZER_MAGIC, self.optimizer.step, moments.iter().map(|(n, t)| (n.as_str(), *t)))?;
        let path = dir.join("history.jsonl");
        let mut body = Vec::new();
        for h in &self.history {
            serde_json::to_writer(&mut body, h)?;
            body.push(b'\n');
        }
        write_bytes(&path, &body)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("config.json");
        let record: CheckpointConfig = serde_json::from_slice(&read_bytes(&path)?)?;
        if record.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", record.version)));
        }
        if record.hash() != record.config_hash {
            return Err(Error::Checkpoint("config hash does not match the stored configuration".into()));
        }
        let (_, params) = read_tensors(&dir.join("params.bin"), PARAMS_MAGIC)?;
        let model = record.rebuild_model(params)?;
        let (step, moments) = read_tensors(&dir.join("optimizer.bin"), OPTIMIZER_MAGIC)?;
        let n = model.tensors().len();
        if moments.len() != 2 * n {
            return Err(Error::Checkpoint(format!("optimizer holds {} moment tensors for {n} parameters", moments.len())));
        }
        let mut moments: Vec<Matrix> = moments.into_iter().map(|(_, m)| m).collect();
        let second = moments.split_off(n);
        let optimizer = Adam { step, first: moments, second };
        let history = BufReader::new(File::open(dir.join("history.jsonl")).map_err(|e| Error::io(dir.join("history.jsonl"), e))?)
            .lines()
            .map(|l| -> Result<HistoryRecord> {
                let l = l.map_err(|e| Error::io(dir.join("history.jsonl"), e))?;
                Ok(serde_json::from_str(&l)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { model, config: record.train, optimizer, progress: record.progress, history })
    }
}

fn by_cutoff(m: &BTreeMap<usize, f64>) -> BTreeMap<String, f64> {
    m.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

const CHECKPOINT_VERSION: u32 = 1;
const PARAMS_MAGIC: &[u8; 8] = b"TDPRPAR1";
const OPTIMIZER_MAGIC: &[u8; 8] = b"TDPROPT1";

/// Prompt bank fields that are not tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptMeta {
    pub config: PromptConfig,
    pub topics: Vec<usize>,
    pub topic_words: Vec<TopicWordSet>,
    pub topic_checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub version: u32,
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    pub prompts: Option<PromptMeta>,
    pub tensor_names: Vec<String>,
    pub progress: Progress,
    pub config_hash: String,
}

impl CheckpointConfig {
    fn from_trainer(t: &Trainer) -> Self {
        let mut c = Self {
            version: CHECKPOINT_VERSION,
            train: t.config.clone(),
            encoder: t.model.encoder.config,
            prompts: t.model.prompts.as_ref().map(|b| PromptMeta {
                config: b.config,
                topics: b.topics.clone(),
                topic_words: b.topic_words.clone(),
                topic_checkpoint: b.topic_checkpoint.clone(),
            }),
            tensor_names: t.model.tensors().into_iter().map(|(n, _)| n).collect(),
            progress: t.progress.clone(),
            config_hash: String::new(),
        };
        c.config_hash = c.hash();
        c
    }

    /// Hash over everything that defines the run, excluding progress.
    pub fn hash(&self) -> String {
        let body = serde_json::to_vec(&(&self.train, &self.encoder, &self.prompts, &self.tensor_names)).unwrap_or_default();
        hex::encode(Sha256::digest(&body))
    }

    fn rebuild_model(&self, params: Vec<(String, Matrix)>) -> Result<Model> {
        let names: Vec<&String> = params.iter().map(|(n, _)| n).collect();
        if names.len() != self.tensor_names.len() || names.iter().zip(&self.tensor_names).any(|(a, b)| *a != b) {
            return Err(Error::Checkpoint("params.bin tensor names differ from config.json".into()));
        }
        let dim = self.encoder.dim;
        let mut enc = EncoderParams::init(self.encoder, &mut ChaCha8Rng::seed_from_u64(0))?;
        let prompts = self.prompts.as_ref().map(|m| PromptBank {
            config: m.config,
            encoder: PromptEncoderParams {
                word_embeddings: Matrix::zeros(0, 0),
                blocks: (0..m.config.depth).map(|_| ResidualBlock { weight: Matrix::zeros(0, 0), bias: Matrix::zeros(0, 0) }).collect(),
                prompt_len: m.config.prompt_len,
            },
            prefix: PrefixMatrix { weight: Matrix::zeros(dim, 0) },
            topics: m.topics.clone(),
            topic_words: m.topic_words.clone(),
            topic_checkpoint: m.topic_checkpoint.clone(),
        });
        // Encoder tensors keep their initialized shapes, so check them; the
        // prompt tensors are taken as stored.
        let n_enc = enc.tensors().len();
        for (slot, (name, value)) in enc.tensors_mut().into_iter().zip(&params) {
            if slot.shape() != value.shape() {
                return Err(Error::Checkpoint(format!("tensor {name} has shape {:?}, expected {:?}", value.shape(), slot.shape())));
            }
            *slot = value.clone();
        }
        let mut model = Model::new(enc, prompts);
        for (slot, (_, value)) in model.tensors_mut().into_iter().zip(params).skip(n_enc) {
            *slot = value;
        }
        if let Some(b) = &model.prompts {
            let ok = b.encoder.word_embeddings.shape() == model.encoder.embeddings.token.shape()
                && b.prefix.weight.shape() == (dim, 2 * dim * self.encoder.num_layers)
                && b.encoder.blocks.iter().all(|r| r.weight.shape() == (dim, dim) && r.bias.shape() == (1, dim));
            if !ok {
                return Err(Error::Checkpoint("prompt tensors do not match the encoder configuration".into()));
            }
        }
        Ok(model)
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Layout: magic, u64 counter, u32 tensor count, then per tensor u32 name
/// length, name, u64 rows, u64 cols and little-endian f64 values.
fn write_tensors<'a>(path: &Path, magic: &[u8; 8], counter: u64, tensors: impl Iterator<Item = (&'a str, &'a Matrix)>) -> Result<()> {
    let tensors: Vec<_> = tensors.collect();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let mut body = || -> std::io::Result<()> {
        w.write_all(magic)?;
        w.write_all(&counter.to_le_bytes())?;
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rows() as u64).to_le_bytes())?;
            w.write_all(&(t.cols() as u64).to_le_bytes())?;
            for x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()
    };
    body().map_err(|e| Error::io(path, e))
}

fn read_tensors(path: &Path, magic: &[u8; 8]) -> Result<(u64, Vec<(String, Matrix)>)> {
    let bytes = read_bytes(path)?;
    let mut r = bytes.as_slice();
    let bad = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
    let mut take = |n: usize| -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        r.read_exact(&mut buf).map_err(|_| bad("truncated file"))?;
        Ok(buf)
    };
    if take(8)? != magic {
        return Err(bad("wrong magic bytes"));
    }
    let u64_of = |b: Vec<u8>| u64::from_le_bytes(b.try_into().expect("8 bytes"));
    let u32_of = |b: Vec<u8>| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let counter = u64_of(take(8)?);
    let count = u32_of(take(4)?) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32_of(take(4)?) as usize;
        let name = String::from_utf8(take(len)?).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rows = u64_of(take(8)?) as usize;
        let cols = u64_of(take(8)?) as usize;
        let raw = take(rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or_else(|| bad("tensor size overflow"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    if !r.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok((counter, out))
}
