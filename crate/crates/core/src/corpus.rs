//! Semi-structured document collections: `(title, abstract, categories)`.
//!
//! Covers JSON-lines loading and writing, tokenization, the shared vocabulary,
//! seeded splits, the planted-topic synthetic generator and the
//! prepend-words transformation used for the topic-word quality experiment.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const UNK_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
const RESERVED: [&str; 2] = [UNK_TOKEN, CLS_TOKEN];

/// One `(T_i, A_i, C_i)` record. Text fields hold tokens; ids are assigned
/// once a [`Vocabulary`] exists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub title: Vec<String>,
    pub abstract_text: Vec<String>,
    pub categories: BTreeSet<String>,
}

impl Document {
    /// Usable for training and evaluation: non-empty categories and texts.
    pub fn is_eligible(&self) -> bool {
        !self.categories.is_empty() && !self.title.is_empty() && !self.abstract_text.is_empty()
    }

    pub fn shares_category(&self, other: &Document) -> bool {
        self.categories.intersection(&other.categories).next().is_some()
    }
}

/// On-disk line format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub id: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    pub categories: Vec<String>,
}

impl From<&Document> for DocumentRecord {
    fn from(d: &Document) -> Self {
        Self {
            id: d.id.clone(),
            title: d.title.join(" "),
            abstract_text: d.abstract_text.join(" "),
            categories: d.categories.iter().cloned().collect(),
        }
    }
}

impl From<DocumentRecord> for Document {
    fn from(r: DocumentRecord) -> Self {
        Self {
            title: tokenize(&r.title),
            abstract_text: tokenize(&r.abstract_text),
            categories: r.categories.into_iter().collect(),
            id: r.id,
        }
    }
}

/// Lowercase, split on non-alphanumeric runs, drop tokens shorter than two
/// characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2)
        .map(str::to_lowercase)
        .collect()
}

pub fn parse_corpus<R: BufRead>(reader: R) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DocumentRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::DuplicateId(record.id));
        }
        let doc = Document::from(record);
        if doc.categories.is_empty() {
            log::warn!("line {line_no}: document `{}` has no categories; excluded from training", doc.id);
        } else if !doc.is_eligible() {
            log::warn!("line {line_no}: document `{}` has an empty title or abstract after tokenization", doc.id);
        }
        docs.push(doc);
    }
    Ok(docs)
}

/// Reads a JSON-lines corpus, one document per line in file order.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(BufReader::new(file))
}

pub fn write_corpus(path: impl AsRef<Path>, docs: &[Document]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in docs {
        serde_json::to_writer(&mut w, &DocumentRecord::from(d))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Token dictionary shared by the topic model and the encoder. Ids `0` and `1`
/// are the reserved unknown and `[CLS]` tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabularyRecord", into = "VocabularyRecord")]
pub struct Vocabulary {
    index: HashMap<String, u32>,
    tokens: Vec<String>,
    counts: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRecord {
    tokens: Vec<String>,
    counts: Vec<u64>,
}

impl From<VocabularyRecord> for Vocabulary {
    fn from(r: VocabularyRecord) -> Self {
        let index = r.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { index, tokens: r.tokens, counts: r.counts }
    }
}

impl From<Vocabulary> for VocabularyRecord {
    fn from(v: Vocabulary) -> Self {
        Self { tokens: v.tokens, counts: v.counts }
    }
}

impl Vocabulary {
    /// Tokens with corpus frequency `>= min_count`, ordered by descending
    /// frequency then lexicographically.
    pub fn build(docs: &[Document], min_count: u64) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if min_count < 1 {
            return Err(Error::InvalidArgument("min_count must be at least 1".into()));
        }
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for d in docs {
            for t in d.title.iter().chain(&d.abstract_text) {
                *freq.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut unknown = 0;
        let mut kept: Vec<(&str, u64)> = Vec::new();
        for (t, c) in freq {
            if c >= min_count && !RESERVED.contains(&t) {
                kept.push((t, c));
            } else {
                unknown += c;
            }
        }
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![unknown, 0];
        for (t, c) in kept {
            tokens.push(t.to_string());
            counts.push(c);
        }
        Ok(VocabularyRecord { tokens, counts }.into())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    /// Retained (non-reserved) token lookup.
    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied().filter(|&i| i >= RESERVED.len() as u32)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts.get(id as usize).copied().unwrap_or(0)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn tokenize_ids(&self, text: &str) -> Vec<u32> {
        self.encode(&tokenize(text))
    }

    /// Ids of the retained tokens, `[2, |V|)`.
    pub fn content_ids(&self) -> std::ops::Range<u32> {
        RESERVED.len() as u32..self.tokens.len() as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.8, dev: 0.1, test: 0.1 }
    }
}

#[derive(Debug, Clone)]
pub struct CorpusSplit {
    pub train: Vec<Document>,
    pub dev: Vec<Document>,
    pub test: Vec<Document>,
    pub ratios: SplitRatios,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: SplitRatios,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

/// Part sizes: floor of each share, leftover documents handed out by largest
/// fractional remainder (earlier parts win ties).
fn part_sizes(n: usize, ratios: &SplitRatios) -> [usize; 3] {
    let shares = [ratios.train, ratios.dev, ratios.test].map(|f| f * n as f64);
    let mut sizes = shares.map(|s| (s + 1e-9).floor() as usize);
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = shares[a] - sizes[a] as f64;
        let fb = shares[b] - sizes[b] as f64;
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if shares[i] > 0.0 {
            sizes[i] += 1;
            left -= 1;
        }
    }
    sizes
}

/// Seeded shuffle followed by a contiguous train/dev/test partition.
pub fn split_corpus(docs: &[Document], ratios: SplitRatios, seed: u64) -> Result<CorpusSplit> {
    let fr = [ratios.train, ratios.dev, ratios.test];
    if fr.iter().any(|&f| !(f >= 0.0) || !f.is_finite()) || ((fr.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split fractions {fr:?} must be non-negative and sum to 1")));
    }
    let sizes = part_sizes(docs.len(), &ratios);
    if let Some(i) = sizes.iter().position(|&s| s == 0) {
        let name = ["train", "dev", "test"][i];
        return Err(Error::InvalidArgument(format!("{name} part would be empty for {} documents", docs.len())));
    }
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |range: std::ops::Range<usize>| order[range].iter().map(|&i| docs[i].clone()).collect::<Vec<_>>();
    Ok(CorpusSplit {
        train: take(0..sizes[0]),
        dev: take(sizes[0]..sizes[0] + sizes[1]),
        test: take(sizes[0] + sizes[1]..docs.len()),
        ratios,
        seed,
    })
}

impl CorpusSplit {
    pub fn manifest(&self) -> SplitManifest {
        SplitManifest {
            seed: self.seed,
            ratios: self.ratios,
            train: self.train.len(),
            dev: self.dev.len(),
            test: self.test.len(),
        }
    }

    /// Writes `train.jsonl`, `dev.jsonl`, `test.jsonl` and `split.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_corpus(dir.join("train.jsonl"), &self.train)?;
        write_corpus(dir.join("dev.jsonl"), &self.dev)?;
        write_corpus(dir.join("test.jsonl"), &self.test)?;
        let path = dir.join("split.json");
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::to_writer_pretty(f, &self.manifest())?;
        Ok(())
    }
}

/// Source of the words prepended to each document.
pub enum PrependMode<'a> {
    /// Per-document word lists keyed by document id, shared by both fields.
    Topic(&'a BTreeMap<String, Vec<String>>),
    /// Separate per-document lists for the title and the abstract, for text
    /// whose topic is inferred from each field on its own.
    TopicPerField { title: &'a BTreeMap<String, Vec<String>>, abstract_text: &'a BTreeMap<String, Vec<String>> },
    /// `count` words drawn uniformly from the retained vocabulary, drawn
    /// independently for the title and the abstract.
    Random { vocabulary: &'a Vocabulary, count: usize, seed: u64 },
}

fn lookup(map: &BTreeMap<String, Vec<String>>, id: &str) -> Result<Vec<String>> {
    map.get(id).cloned().ok_or_else(|| Error::UnknownDocument(id.to_string()))
}

/// `[WORDS...] + title` and `[WORDS...] + abstract` for every document.
pub fn prepend_topic_words(docs: &[Document], mode: &PrependMode<'_>) -> Result<Vec<Document>> {
    let mut rng = match mode {
        PrependMode::Random { seed, .. } => Some(ChaCha8Rng::seed_from_u64(*seed)),
        _ => None,
    };
    let mut random_words = |vocabulary: &Vocabulary, count: usize| -> Result<Vec<String>> {
        let ids = vocabulary.content_ids();
        if ids.is_empty() {
            return Err(Error::InvalidArgument("vocabulary has no retained tokens".into()));
        }
        let rng = rng.as_mut().expect("random mode carries an rng");
        Ok((0..count).map(|_| vocabulary.token(rng.random_range(ids.clone())).unwrap_or(UNK_TOKEN).to_string()).collect())
    };
    docs.iter()
        .map(|d| {
            let (t, a) = match mode {
                PrependMode::Topic(map) => {
                    let w = lookup(map, &d.id)?;
                    (w.clone(), w)
                }
                PrependMode::TopicPerField { title, abstract_text } => (lookup(title, &d.id)?, lookup(abstract_text, &d.id)?),
                PrependMode::Random { vocabulary, count, .. } => (random_words(vocabulary, *count)?, random_words(vocabulary, *count)?),
            };
            let mut out = d.clone();
            out.title = t.into_iter().chain(d.title.iter().cloned()).collect();
            out.abstract_text = a.into_iter().chain(d.abstract_text.iter().cloned()).collect();
            Ok(out)
        })
        .collect()
}

/// Planted-topic corpus parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticConfig {
    pub num_topics: usize,
    pub docs_per_topic: usize,
    pub vocab_size: usize,
    /// Abstract length in tokens.
    pub doc_length: usize,
    pub title_length: usize,
    /// Probability that a token comes from the shared pool.
    pub overlap: f64,
    /// Fraction of documents carrying a second category.
    pub multi_label_fraction: f64,
    /// Probability that a title token is swapped for its paraphrase, a token
    /// that never occurs in abstracts.
    pub paraphrase_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_topics: 4,
            docs_per_topic: 40,
            vocab_size: 400,
            doc_length: 24,
            title_length: 6,
            overlap: 0.3,
            multi_label_fraction: 0.1,
            paraphrase_noise: 0.0,
            seed: 0,
        }
    }
}

pub fn topic_label(k: usize) -> String {
    format!("topic{k}")
}

/// Documents whose tokens are sampled from planted per-topic blocks (Zipf
/// weights inside a block) plus a shared pool. Document `i` belongs to topic
/// `i mod num_topics`.
pub fn generate_synthetic_corpus(cfg: &SyntheticConfig) -> Result<Vec<Document>> {
    if cfg.num_topics == 0 || cfg.docs_per_topic == 0 || cfg.doc_length == 0 || cfg.title_length == 0 {
        return Err(Error::InvalidArgument("topic count, documents per topic and lengths must be positive".into()));
    }
    if cfg.vocab_size < cfg.num_topics * 20 {
        return Err(Error::InvalidArgument(format!(
            "vocab_size {} is below 20 tokens per topic for {} topics",
            cfg.vocab_size, cfg.num_topics
        )));
    }
    if !(0.0..1.0).contains(&cfg.overlap) {
        return Err(Error::InvalidArgument(format!("overlap {} must lie in [0, 1)", cfg.overlap)));
    }
    for (name, v) in [("multi_label_fraction", cfg.multi_label_fraction), ("paraphrase_noise", cfg.paraphrase_noise)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("{name} {v} must lie in [0, 1]")));
        }
    }
    if cfg.multi_label_fraction > 0.0 && cfg.num_topics < 2 {
        return Err(Error::InvalidArgument("multi-label documents need at least two topics".into()));
    }
    let shared = if cfg.overlap > 0.0 { ((cfg.overlap * cfg.vocab_size as f64).round() as usize).max(1) } else { 0 };
    let block = (cfg.vocab_size - shared) / cfg.num_topics;
    if block < 2 {
        return Err(Error::InvalidArgument("topic blocks would hold fewer than two tokens".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ids: Vec<usize> = (0..cfg.vocab_size).collect();
    ids.shuffle(&mut rng);
    let blocks: Vec<&[usize]> = (0..cfg.num_topics).map(|k| &ids[k * block..(k + 1) * block]).collect();
    let pool = &ids[cfg.num_topics * block..cfg.num_topics * block + shared];
    let zipf = WeightedIndex::new((0..block).map(|r| 1.0 / ((r + 1) as f64).powf(0.7))).expect("positive weights");

    let word = |i: usize| format!("w{i:04}");
    let paraphrase = |i: usize| format!("p{i:04}");
    let mut docs = Vec::with_capacity(cfg.num_topics * cfg.docs_per_topic);
    for n in 0..cfg.num_topics * cfg.docs_per_topic {
        let topic = n % cfg.num_topics;
        let mut categories = BTreeSet::from([topic_label(topic)]);
        let second = if rng.random_bool(cfg.multi_label_fraction) {
            let other = (topic + rng.random_range(1..cfg.num_topics)) % cfg.num_topics;
            categories.insert(topic_label(other));
            Some(other)
        } else {
            None
        };
        let draw = |rng: &mut ChaCha8Rng| -> usize {
            if shared > 0 && rng.random_bool(cfg.overlap) {
                return pool[rng.random_range(0..shared)];
            }
            let k = match second {
                Some(o) if rng.random_bool(0.3) => o,
                _ => topic,
            };
            blocks[k][zipf.sample(rng)]
        };
        let title = (0..cfg.title_length)
            .map(|_| {
                let w = draw(&mut rng);
                if cfg.paraphrase_noise > 0.0 && rng.random_bool(cfg.paraphrase_noise) {
                    paraphrase(w)
                } else {
                    word(w)
                }
            })
            .collect();
        let abstract_text = (0..cfg.doc_length).map(|_| word(draw(&mut rng))).collect();
        docs.push(Document { id: format!("d{n:05}"), title, abstract_text, categories });
    }
    Ok(docs)
}

/// Planted topic of a synthetic document (its first `topicN` label in
/// generation order is encoded by the document index).
pub fn planted_topic(doc_index: usize, num_topics: usize) -> usize {
    doc_index % num_topics
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, title: &str, abs: &str, cats: &[&str]) -> Document {
        Document {
            id: id.into(),
            title: tokenize(title),
            abstract_text: tokenize(abs),
            categories: cats.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize("Deep Passage-Retrieval!"), vec!["deep", "passage", "retrieval"]);
        assert!(tokenize("a b c").is_empty());
        assert_eq!(tokenize("X-ray CT"), vec!["ray", "ct"]);
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn parse_single_line() {
        let line = r#"{"id":"d1","title":"graph colouring","abstract":"we study graphs","categories":["cs.DM"]}"#;
        let docs = parse_corpus(line.as_bytes()).unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].title.len(), 2);
        assert_eq!(docs[0].abstract_text.len(), 3);
        assert!(docs[0].is_eligible());
    }

    #[test]
    fn parse_errors() {
        assert!(parse_corpus("".as_bytes()).unwrap().is_empty());
        let dup = concat!(
            r#"{"id":"d1","title":"aa","abstract":"bb","categories":["x"]}"#,
            "\n",
            r#"{"id":"d1","title":"cc","abstract":"dd","categories":["x"]}"#
        );
        assert!(matches!(parse_corpus(dup.as_bytes()), Err(Error::DuplicateId(id)) if id == "d1"));
        let bad = concat!(r#"{"id":"d1","title":"aa","abstract":"bb","categories":["x"]}"#, "\n", "{not json");
        assert!(matches!(parse_corpus(bad.as_bytes()), Err(Error::Parse { line: 2, .. })));
        let empty_cats = r#"{"id":"d1","title":"aa","abstract":"bb","categories":[]}"#;
        let docs = parse_corpus(empty_cats.as_bytes()).unwrap();
        assert!(!docs[0].is_eligible());
    }

    #[test]
    fn vocabulary_ordering_and_cutoff() {
        let d = doc("a", "the the the graph graph", "the the graph rare", &["x"]);
        let v = Vocabulary::build(&[d.clone()], 2).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.token(2), Some("the"));
        assert_eq!(v.token(3), Some("graph"));
        assert_eq!(v.id("rare"), UNK_ID);
        let all = Vocabulary::build(&[d], 1).unwrap();
        assert_eq!(all.id("rare"), 4);

        let tie = doc("b", "zeta alpha", "mid", &["x"]);
        let v = Vocabulary::build(&[tie], 1).unwrap();
        assert_eq!(v.token(2), Some("alpha"));
        assert_eq!(v.token(3), Some("mid"));
        assert_eq!(v.token(4), Some("zeta"));
        assert!(matches!(Vocabulary::build(&[], 1), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn split_sizes_and_errors() {
        let docs: Vec<Document> = (0..10).map(|i| doc(&format!("d{i}"), "aa", "bb", &["x"])).collect();
        let r = SplitRatios { train: 0.8, dev: 0.1, test: 0.1 };
        let s = split_corpus(&docs, r, 7).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (8, 1, 1));
        let again = split_corpus(&docs, r, 7).unwrap();
        assert_eq!(s.train, again.train);
        assert_eq!(s.test, again.test);
        let bad = SplitRatios { train: 0.5, dev: 0.5, test: 0.0 };
        assert!(split_corpus(&docs, bad, 7).is_err());
        let notone = SplitRatios { train: 0.5, dev: 0.2, test: 0.2 };
        assert!(split_corpus(&docs, notone, 7).is_err());
    }

    #[test]
    fn prepend_modes() {
        let d = doc("a", "graph", "body text", &["x"]);
        let map = BTreeMap::from([("a".to_string(), vec!["network".to_string(), "node".to_string()])]);
        let out = prepend_topic_words(&[d.clone()], &PrependMode::Topic(&map)).unwrap();
        assert_eq!(out[0].title, vec!["network", "node", "graph"]);
        assert_eq!(out[0].abstract_text, vec!["network", "node", "body", "text"]);

        let empty = BTreeMap::from([("a".to_string(), vec![])]);
        assert_eq!(prepend_topic_words(&[d.clone()], &PrependMode::Topic(&empty)).unwrap()[0], d);
        let none = BTreeMap::new();
        assert!(matches!(
            prepend_topic_words(&[d.clone()], &PrependMode::Topic(&none)),
            Err(Error::UnknownDocument(id)) if id == "a"
        ));

        let vocab = Vocabulary::build(&[d.clone()], 1).unwrap();
        let mode = PrependMode::Random { vocabulary: &vocab, count: 3, seed: 5 };
        let a = prepend_topic_words(&[d.clone()], &mode).unwrap();
        let b = prepend_topic_words(&[d.clone()], &mode).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].title.len(), 4);
        assert_eq!(a[0].abstract_text.len(), 5);

        let other = BTreeMap::from([("a".to_string(), vec!["edge".to_string()])]);
        let split = prepend_topic_words(&[d], &PrependMode::TopicPerField { title: &map, abstract_text: &other }).unwrap();
        assert_eq!(split[0].title, vec!["network", "node", "graph"]);
        assert_eq!(split[0].abstract_text, vec!["edge", "body", "text"]);
    }

    #[test]
    fn synthetic_construction() {
        let cfg = SyntheticConfig { num_topics: 3, docs_per_topic: 50, overlap: 0.0, multi_label_fraction: 0.0, ..Default::default() };
        let docs = generate_synthetic_corpus(&cfg).unwrap();
        assert_eq!(docs.len(), 150);
        let labels: BTreeSet<_> = docs.iter().flat_map(|d| d.categories.iter().cloned()).collect();
        assert_eq!(labels.len(), 3);
        for (i, a) in docs.iter().enumerate() {
            for (j, b) in docs.iter().enumerate().skip(i + 1) {
                if planted_topic(i, 3) != planted_topic(j, 3) {
                    let ta: HashSet<_> = a.title.iter().chain(&a.abstract_text).collect();
                    assert!(b.title.iter().chain(&b.abstract_text).all(|t| !ta.contains(t)));
                }
            }
        }
        assert_eq!(docs, generate_synthetic_corpus(&cfg).unwrap());
        let bad = SyntheticConfig { vocab_size: 10, ..cfg };
        assert!(generate_synthetic_corpus(&bad).is_err());
    }
}
