//! Hierarchical LDA fitted by nested-CRP collapsed Gibbs sampling.
//!
//! Every document owns a root-to-leaf path of `depth` nodes and every word
//! owns a level on that path. A sweep resamples each document's path
//! (nCRP prior times the marginal likelihood of its words at each level) and
//! then each word's level. Nodes left without documents are pruned.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::function::gamma::ln_gamma;

use crate::corpus::{Document, Vocabulary, CLS_ID, UNK_ID};
use crate::error::{Error, Result};

/// Sampler hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HldaConfig {
    /// Tree depth `h` (levels `0..h`).
    pub depth: usize,
    /// nCRP concentration.
    pub crp_gamma: f64,
    /// Level-mixing smoothing.
    pub alpha: f64,
    /// Topic-word smoothing.
    pub eta: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for HldaConfig {
    fn default() -> Self {
        Self { depth: 3, crp_gamma: 1.0, alpha: 10.0, eta: 0.1, iterations: 500, seed: 0 }
    }
}

impl HldaConfig {
    fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::InvalidArgument(format!("depth must be at least 2, got {}", self.depth)));
        }
        if self.iterations < 1 {
            return Err(Error::InvalidArgument("iterations must be at least 1".into()));
        }
        for (name, v) in [("crp_gamma", self.crp_gamma), ("alpha", self.alpha), ("eta", self.eta)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicNode {
    pub id: usize,
    pub level: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Dense token id → count table.
    pub word_counts: Vec<u32>,
    pub total: u64,
    /// Number of documents whose path passes through this node.
    pub customers: usize,
}

impl TopicNode {
    fn new(id: usize, level: usize, parent: Option<usize>, vocab_size: usize) -> Self {
        Self { id, level, parent, children: Vec::new(), word_counts: vec![0; vocab_size], total: 0, customers: 0 }
    }

    /// `(count + η) / (total + |V| η)`
    pub fn word_probability(&self, word: u32, eta: f64) -> f64 {
        (self.word_counts[word as usize] as f64 + eta) / (self.total as f64 + self.word_counts.len() as f64 * eta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocAssignment {
    pub id: String,
    pub words: Vec<u32>,
    pub path: Vec<usize>,
    pub levels: Vec<u8>,
}

impl DocAssignment {
    fn level_counts(&self, depth: usize) -> Vec<usize> {
        let mut c = vec![0; depth];
        for &l in &self.levels {
            c[l as usize] += 1;
        }
        c
    }
}

/// Position of the `Θ` simplex point for one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicDistribution {
    pub doc_id: String,
    /// Node ids in ascending order; `components[i]` belongs to `topic_ids[i]`.
    pub topic_ids: Vec<usize>,
    pub components: Vec<f64>,
}

impl TopicDistribution {
    pub fn component(&self, topic: usize) -> Option<f64> {
        self.topic_ids.binary_search(&topic).ok().map(|i| self.components[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicWordSet {
    pub topic: usize,
    pub words: Vec<u32>,
    pub probabilities: Vec<f64>,
}

/// Floor assigned to off-path nodes in [`HldaState::doc_topic_distribution`].
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Sampler state: tree, assignments, hyperparameters and RNG position.
#[derive(Debug, Clone)]
pub struct HldaState {
    pub config: HldaConfig,
    vocab_size: usize,
    nodes: BTreeMap<usize, TopicNode>,
    next_id: usize,
    docs: Vec<DocAssignment>,
    doc_index: BTreeMap<String, usize>,
    iteration: usize,
    rng: ChaCha8Rng,
}

/// Words of one document grouped by level: `(word, count)` pairs plus totals.
struct LevelWords {
    words: Vec<Vec<(u32, u32)>>,
    totals: Vec<u32>,
}

impl LevelWords {
    fn new(words: &[u32], levels: &[u8], depth: usize) -> Self {
        let mut maps: Vec<BTreeMap<u32, u32>> = vec![BTreeMap::new(); depth];
        let mut totals = vec![0; depth];
        for (&w, &l) in words.iter().zip(levels) {
            *maps[l as usize].entry(w).or_default() += 1;
            totals[l as usize] += 1;
        }
        Self { words: maps.into_iter().map(|m| m.into_iter().collect()).collect(), totals }
    }
}

/// `ln Γ(x + k) − ln Γ(x)`
fn ln_rising(x: f64, k: u32) -> f64 {
    if k <= 8 {
        (0..k).map(|i| (x + i as f64).ln()).sum()
    } else {
        ln_gamma(x + k as f64) - ln_gamma(x)
    }
}

fn sample_log_weights<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let probs: Vec<f64> = weights.iter().map(|w| (w - max).exp()).collect();
    let total: f64 = probs.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, p) in probs.iter().enumerate() {
        if u < *p {
            return i;
        }
        u -= p;
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

enum PathChoice {
    Leaf(usize),
    /// New branch below the node.
    Branch(usize),
}

/// Content-word ids used by the sampler: title then abstract, reserved ids
/// dropped.
pub fn document_words(doc: &Document, vocab: &Vocabulary) -> Vec<u32> {
    doc.title
        .iter()
        .chain(&doc.abstract_text)
        .map(|t| vocab.id(t))
        .filter(|&id| id != UNK_ID && id != CLS_ID)
        .collect()
}

/// Fits hLDA to `docs` for `config.iterations` sweeps.
pub fn fit_hlda(docs: &[Document], vocab: &Vocabulary, config: HldaConfig) -> Result<HldaState> {
    let mut state = HldaState::initialize(docs, vocab, config)?;
    for _ in 0..config.iterations {
        state.sweep();
    }
    Ok(state)
}

impl HldaState {
    /// Random levels, then sequential path seating of each document.
    pub fn initialize(docs: &[Document], vocab: &Vocabulary, config: HldaConfig) -> Result<Self> {
        config.validate()?;
        if docs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let vocab_size = vocab.len();
        let mut state = Self {
            config,
            vocab_size,
            nodes: BTreeMap::from([(0, TopicNode::new(0, 0, None, vocab_size))]),
            next_id: 1,
            docs: Vec::with_capacity(docs.len()),
            doc_index: BTreeMap::new(),
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        for d in docs {
            if state.doc_index.insert(d.id.clone(), state.docs.len()).is_some() {
                return Err(Error::DuplicateId(d.id.clone()));
            }
            let words = document_words(d, vocab);
            let levels = words.iter().map(|_| state.rng.random_range(0..config.depth) as u8).collect();
            state.docs.push(DocAssignment { id: d.id.clone(), words, path: Vec::new(), levels });
        }
        for i in 0..state.docs.len() {
            let path = state.sample_path(i, true);
            state.docs[i].path = path;
            state.add_doc(i);
        }
        Ok(state)
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    pub fn nodes(&self) -> impl Iterator<Item = &TopicNode> {
        self.nodes.values()
    }

    pub fn node(&self, id: usize) -> Option<&TopicNode> {
        self.nodes.get(&id)
    }

    pub fn root(&self) -> &TopicNode {
        &self.nodes[&0]
    }

    /// Retained node count `K`.
    pub fn num_topics(&self) -> usize {
        self.nodes.len()
    }

    pub fn documents(&self) -> &[DocAssignment] {
        &self.docs
    }

    pub fn document(&self, id: &str) -> Result<&DocAssignment> {
        self.doc_index.get(id).map(|&i| &self.docs[i]).ok_or_else(|| Error::UnknownDocument(id.to_string()))
    }

    /// One Gibbs sweep over every document.
    pub fn sweep(&mut self) {
        for i in 0..self.docs.len() {
            self.remove_doc(i);
            let path = self.sample_path(i, true);
            self.docs[i].path = path;
            self.add_doc(i);
            self.sample_levels(i);
        }
        self.iteration += 1;
    }

    fn add_doc(&mut self, i: usize) {
        let doc = &self.docs[i];
        for &n in &doc.path {
            self.nodes.get_mut(&n).expect("path node exists").customers += 1;
        }
        for (&w, &l) in doc.words.iter().zip(&doc.levels) {
            let node = self.nodes.get_mut(&doc.path[l as usize]).expect("path node exists");
            node.word_counts[w as usize] += 1;
            node.total += 1;
        }
    }

    fn remove_doc(&mut self, i: usize) {
        let doc = &self.docs[i];
        for (&w, &l) in doc.words.iter().zip(&doc.levels) {
            let node = self.nodes.get_mut(&doc.path[l as usize]).expect("path node exists");
            node.word_counts[w as usize] -= 1;
            node.total -= 1;
        }
        for &n in doc.path.clone().iter().rev() {
            let node = self.nodes.get_mut(&n).expect("path node exists");
            node.customers -= 1;
            if node.customers == 0 && n != 0 {
                debug_assert_eq!(node.total, 0);
                let parent = node.parent.expect("non-root node has a parent");
                self.nodes.remove(&n);
                self.nodes.get_mut(&parent).expect("parent exists").children.retain(|&c| c != n);
            }
        }
    }

    fn level_likelihood(&self, node: &TopicNode, words: &[(u32, u32)], total: u32) -> f64 {
        let eta = self.config.eta;
        let v_eta = self.vocab_size as f64 * eta;
        let mut ll = -ln_rising(node.total as f64 + v_eta, total);
        for &(w, c) in words {
            ll += ln_rising(node.word_counts[w as usize] as f64 + eta, c);
        }
        ll
    }

    fn new_level_likelihood(&self, words: &[(u32, u32)], total: u32) -> f64 {
        let eta = self.config.eta;
        let mut ll = -ln_rising(self.vocab_size as f64 * eta, total);
        for &(_, c) in words {
            ll += ln_rising(eta, c);
        }
        ll
    }

    /// Samples a path for document `i`, which must not be counted in the tree.
    /// With `allow_new` false only existing leaves are candidates.
    fn sample_path(&mut self, i: usize, allow_new: bool) -> Vec<usize> {
        let depth = self.config.depth;
        let lw = LevelWords::new(&self.docs[i].words, &self.docs[i].levels, depth);
        let choice = self.choose_path(&lw, allow_new);
        self.materialize(choice)
    }

    fn choose_path(&mut self, lw: &LevelWords, allow_new: bool) -> PathChoice {
        let depth = self.config.depth;
        let gamma = self.config.crp_gamma;
        // Likelihood of fresh nodes at levels l..depth.
        let mut new_tail = vec![0.0; depth + 1];
        for l in (0..depth).rev() {
            new_tail[l] = new_tail[l + 1] + self.new_level_likelihood(&lw.words[l], lw.totals[l]);
        }
        let mut candidates: Vec<(PathChoice, f64)> = Vec::new();
        let root = &self.nodes[&0];
        let root_weight = self.level_likelihood(root, &lw.words[0], lw.totals[0]);
        let mut stack = vec![(0usize, root_weight)];
        while let Some((id, weight)) = stack.pop() {
            let node = &self.nodes[&id];
            if node.level == depth - 1 {
                candidates.push((PathChoice::Leaf(id), weight));
                continue;
            }
            let denom = (node.customers as f64 + gamma).ln();
            if allow_new || node.children.is_empty() {
                candidates.push((PathChoice::Branch(id), weight + gamma.ln() - denom + new_tail[node.level + 1]));
            }
            for &c in node.children.iter().rev() {
                let child = &self.nodes[&c];
                let l = child.level;
                let w = weight + (child.customers as f64).ln() - denom
                    + self.level_likelihood(child, &lw.words[l], lw.totals[l]);
                stack.push((c, w));
            }
        }
        let weights: Vec<f64> = candidates.iter().map(|c| c.1).collect();
        let pick = sample_log_weights(&weights, &mut self.rng);
        candidates.swap_remove(pick).0
    }

    fn materialize(&mut self, choice: PathChoice) -> Vec<usize> {
        let depth = self.config.depth;
        let mut id = match choice {
            PathChoice::Leaf(id) | PathChoice::Branch(id) => id,
        };
        while self.nodes[&id].level < depth - 1 {
            let level = self.nodes[&id].level + 1;
            let new = self.next_id;
            self.next_id += 1;
            self.nodes.insert(new, TopicNode::new(new, level, Some(id), self.vocab_size));
            self.nodes.get_mut(&id).expect("parent exists").children.push(new);
            id = new;
        }
        let mut path = vec![0; depth];
        let mut cur = id;
        for l in (0..depth).rev() {
            path[l] = cur;
            if let Some(p) = self.nodes[&cur].parent {
                cur = p;
            }
        }
        path
    }

    fn sample_levels(&mut self, i: usize) {
        let depth = self.config.depth;
        let (alpha, eta) = (self.config.alpha, self.config.eta);
        let mut level_counts = self.docs[i].level_counts(depth);
        let mut probs = vec![0.0; depth];
        for pos in 0..self.docs[i].words.len() {
            let w = self.docs[i].words[pos] as usize;
            let old = self.docs[i].levels[pos] as usize;
            let old_node = self.docs[i].path[old];
            {
                let n = self.nodes.get_mut(&old_node).expect("path node exists");
                n.word_counts[w] -= 1;
                n.total -= 1;
            }
            level_counts[old] -= 1;
            for (l, p) in probs.iter_mut().enumerate() {
                let node = &self.nodes[&self.docs[i].path[l]];
                *p = (level_counts[l] as f64 + alpha) * node.word_probability(w as u32, eta);
            }
            let total: f64 = probs.iter().sum();
            let mut u = self.rng.random::<f64>() * total;
            let mut new = depth - 1;
            for (l, p) in probs.iter().enumerate() {
                if u < *p {
                    new = l;
                    break;
                }
                u -= p;
            }
            self.docs[i].levels[pos] = new as u8;
            level_counts[new] += 1;
            let n = self.nodes.get_mut(&self.docs[i].path[new]).expect("path node exists");
            n.word_counts[w] += 1;
            n.total += 1;
        }
    }

    /// Topic distribution of a fitted document: on-path nodes get
    /// `count + alpha`, off-path nodes get `epsilon`, then renormalized.
    pub fn doc_topic_distribution(&self, doc_id: &str) -> Result<TopicDistribution> {
        self.doc_topic_distribution_with(doc_id, self.config.alpha, DEFAULT_EPSILON)
    }

    pub fn doc_topic_distribution_with(&self, doc_id: &str, alpha: f64, epsilon: f64) -> Result<TopicDistribution> {
        let doc = self.document(doc_id)?;
        Ok(self.distribution_for(doc_id, &doc.path, &doc.levels, alpha, epsilon))
    }

    fn distribution_for(&self, doc_id: &str, path: &[usize], levels: &[u8], alpha: f64, epsilon: f64) -> TopicDistribution {
        let counts = {
            let mut c = vec![0usize; self.config.depth];
            for &l in levels {
                c[l as usize] += 1;
            }
            c
        };
        let topic_ids: Vec<usize> = self.nodes.keys().copied().collect();
        let mut components: Vec<f64> = topic_ids
            .iter()
            .map(|id| match path.iter().position(|p| p == id) {
                Some(l) => counts[l] as f64 + alpha,
                None => epsilon,
            })
            .collect();
        let total: f64 = components.iter().sum();
        if total > 0.0 {
            for c in &mut components {
                *c /= total;
            }
        } else {
            // Empty document with zero smoothing: spread mass over the path.
            for (c, id) in components.iter_mut().zip(&topic_ids) {
                *c = if path.contains(id) { 1.0 / path.len() as f64 } else { 0.0 };
            }
        }
        TopicDistribution { doc_id: doc_id.to_string(), topic_ids, components }
    }

    /// Assignment of an unseen document: random levels, then `passes` Gibbs
    /// passes over path and levels with all topic counts frozen. The RNG is
    /// derived from the sampler seed and the document's words.
    pub fn fold_in(&self, doc_id: &str, words: &[u32], passes: usize) -> DocAssignment {
        let depth = self.config.depth;
        let mut hasher = Sha256::new();
        hasher.update(self.config.seed.to_le_bytes());
        for w in words {
            hasher.update(w.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut rng = ChaCha8Rng::from_seed(digest.into());
        let levels: Vec<u8> = words.iter().map(|_| rng.random_range(0..depth) as u8).collect();
        let mut doc = DocAssignment { id: doc_id.to_string(), words: words.to_vec(), path: Vec::new(), levels };
        let (alpha, eta) = (self.config.alpha, self.config.eta);
        for _ in 0..passes.max(1) {
            let lw = LevelWords::new(&doc.words, &doc.levels, depth);
            doc.path = self.frozen_path(&lw, &mut rng);
            let mut counts = doc.level_counts(depth);
            let mut probs = vec![0.0; depth];
            for pos in 0..doc.words.len() {
                let w = doc.words[pos];
                counts[doc.levels[pos] as usize] -= 1;
                for (l, p) in probs.iter_mut().enumerate() {
                    *p = (counts[l] as f64 + alpha) * self.nodes[&doc.path[l]].word_probability(w, eta);
                }
                let total: f64 = probs.iter().sum();
                let mut u = rng.random::<f64>() * total;
                let mut new = depth - 1;
                for (l, p) in probs.iter().enumerate() {
                    if u < *p {
                        new = l;
                        break;
                    }
                    u -= p;
                }
                doc.levels[pos] = new as u8;
                counts[new] += 1;
            }
        }
        doc
    }

    /// Existing-leaf path sampling without touching the tree.
    fn frozen_path(&self, lw: &LevelWords, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let depth = self.config.depth;
        let gamma = self.config.crp_gamma;
        let mut leaves: Vec<(usize, f64)> = Vec::new();
        let mut stack = vec![(0usize, self.level_likelihood(self.root(), &lw.words[0], lw.totals[0]))];
        while let Some((id, weight)) = stack.pop() {
            let node = &self.nodes[&id];
            if node.children.is_empty() {
                leaves.push((id, weight));
                continue;
            }
            let denom = (node.customers as f64 + gamma).ln();
            for &c in node.children.iter().rev() {
                let child = &self.nodes[&c];
                let l = child.level;
                let w = weight + (child.customers as f64).ln() - denom
                    + self.level_likelihood(child, &lw.words[l], lw.totals[l]);
                stack.push((c, w));
            }
        }
        let weights: Vec<f64> = leaves.iter().map(|l| l.1).collect();
        let leaf = leaves[sample_log_weights(&weights, rng)].0;
        let mut path = vec![0; depth];
        let mut cur = leaf;
        for l in (0..depth).rev() {
            path[l] = cur;
            if let Some(p) = self.nodes[&cur].parent {
                cur = p;
            }
        }
        path
    }

    /// Distribution for any document: fitted documents use their stored
    /// assignment; others are folded in with one pass.
    pub fn infer_distribution(&self, doc: &Document, vocab: &Vocabulary) -> TopicDistribution {
        if let Ok(d) = self.document(&doc.id) {
            return self.distribution_for(&doc.id, &d.path, &d.levels, self.config.alpha, DEFAULT_EPSILON);
        }
        let folded = self.fold_in(&doc.id, &document_words(doc, vocab), 1);
        self.distribution_for(&doc.id, &folded.path, &folded.levels, self.config.alpha, DEFAULT_EPSILON)
    }

    pub fn infer_words_distribution(&self, doc_id: &str, words: &[u32]) -> TopicDistribution {
        let folded = self.fold_in(doc_id, words, 1);
        self.distribution_for(doc_id, &folded.path, &folded.levels, self.config.alpha, DEFAULT_EPSILON)
    }

    /// Expected topic proportions of unseen text under the frozen tree,
    /// without sampling. Each existing root-to-leaf path is weighted by its
    /// nested-CRP prior times the likelihood of the words under a uniform
    /// mixture of the path's nodes; a node's component is the posterior
    /// expected share of words it explains.
    pub fn expected_distribution(&self, doc_id: &str, words: &[u32]) -> TopicDistribution {
        let depth = self.config.depth;
        let eta = self.config.eta;
        let gamma = self.config.crp_gamma;
        let mut paths: Vec<(Vec<usize>, f64)> = Vec::new();
        let mut stack = vec![(vec![0usize], 0.0)];
        while let Some((path, prior)) = stack.pop() {
            let node = &self.nodes[path.last().expect("non-empty path")];
            if node.children.is_empty() || path.len() == depth {
                paths.push((path, prior));
                continue;
            }
            let denom = (node.customers as f64 + gamma).ln();
            for &c in &node.children {
                let mut next = path.clone();
                next.push(c);
                stack.push((next, prior + (self.nodes[&c].customers as f64).ln() - denom));
            }
        }
        let topic_ids: Vec<usize> = self.nodes.keys().copied().collect();
        let mut components = vec![0.0; topic_ids.len()];
        let mut log_post = Vec::with_capacity(paths.len());
        let mut shares = Vec::with_capacity(paths.len());
        for (path, prior) in &paths {
            let mut ll = *prior;
            let mut share = vec![0.0; path.len()];
            for &w in words {
                let probs: Vec<f64> = path.iter().map(|id| self.nodes[id].word_probability(w, eta)).collect();
                let total: f64 = probs.iter().sum();
                ll += (total / path.len() as f64).ln();
                for (s, p) in share.iter_mut().zip(&probs) {
                    *s += p / total;
                }
            }
            if words.is_empty() {
                share.iter_mut().for_each(|s| *s = 1.0 / path.len() as f64);
            } else {
                share.iter_mut().for_each(|s| *s /= words.len() as f64);
            }
            log_post.push(ll);
            shares.push(share);
        }
        let max = log_post.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = log_post.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = weights.iter().sum();
        for ((path, _), (w, share)) in paths.iter().zip(weights.iter().zip(&shares)) {
            for (id, s) in path.iter().zip(share) {
                let k = topic_ids.binary_search(id).expect("path nodes are retained");
                components[k] += w / z * s;
            }
        }
        let total: f64 = components.iter().sum();
        components.iter_mut().for_each(|c| *c /= total);
        TopicDistribution { doc_id: doc_id.to_string(), topic_ids, components }
    }

    /// Nodes at `level` ordered by descending document-path count, ties by id.
    pub fn select_prompt_topics(&self, level: usize) -> Result<Vec<usize>> {
        if level == 0 || level >= self.config.depth {
            return Err(Error::InvalidArgument(format!("prompt level must lie in [1, {}), got {level}", self.config.depth)));
        }
        let mut at: Vec<&TopicNode> = self.nodes.values().filter(|n| n.level == level).collect();
        if at.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "level {level} holds {} topic(s); at least 2 are needed for distinct prompts",
                at.len()
            )));
        }
        at.sort_by(|a, b| b.customers.cmp(&a.customers).then(a.id.cmp(&b.id)));
        Ok(at.into_iter().map(|n| n.id).collect())
    }

    /// Up to `l` tokens with the highest smoothed probability in `topic`.
    pub fn top_words(&self, topic: usize, l: usize) -> Result<TopicWordSet> {
        let node = self.nodes.get(&topic).ok_or(Error::UnknownTopic(topic))?;
        let mut words: Vec<(u32, u32)> = node
            .word_counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(w, &c)| (w as u32, c))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        words.truncate(l);
        let eta = self.config.eta;
        Ok(TopicWordSet {
            topic,
            probabilities: words.iter().map(|&(w, _)| node.word_probability(w, eta)).collect(),
            words: words.into_iter().map(|(w, _)| w).collect(),
        })
    }

    /// `ln p(words | assignments)` with topic-word distributions integrated out.
    pub fn log_likelihood(&self) -> f64 {
        let eta = self.config.eta;
        let v_eta = self.vocab_size as f64 * eta;
        self.nodes
            .values()
            .map(|n| {
                let mut ll = ln_gamma(v_eta) - ln_gamma(n.total as f64 + v_eta);
                for &c in n.word_counts.iter().filter(|&&c| c > 0) {
                    ll += ln_gamma(c as f64 + eta) - ln_gamma(eta);
                }
                ll
            })
            .sum()
    }

    /// Per-word predictive log-likelihood of unseen documents after fold-in:
    /// `Σ_i ln Σ_l θ_l φ_{path_l}(w_i)`.
    pub fn heldout_log_likelihood(&self, docs: &[(String, Vec<u32>)]) -> f64 {
        let depth = self.config.depth;
        let (alpha, eta) = (self.config.alpha, self.config.eta);
        let mut total = 0.0;
        for (id, words) in docs {
            let folded = self.fold_in(id, words, 1);
            let counts = folded.level_counts(depth);
            let n = words.len() as f64;
            for &w in words {
                let p: f64 = (0..depth)
                    .map(|l| {
                        let theta = (counts[l] as f64 + alpha) / (n + depth as f64 * alpha);
                        theta * self.nodes[&folded.path[l]].word_probability(w, eta)
                    })
                    .sum();
                total += p.ln();
            }
        }
        total
    }

    /// Recomputes every count table from the raw assignments and compares.
    pub fn recount_matches(&self) -> bool {
        let mut counts: BTreeMap<usize, (Vec<u32>, u64, usize)> =
            self.nodes.keys().map(|&k| (k, (vec![0; self.vocab_size], 0, 0))).collect();
        for d in &self.docs {
            for n in &d.path {
                match counts.get_mut(n) {
                    Some(e) => e.2 += 1,
                    None => return false,
                }
            }
            for (&w, &l) in d.words.iter().zip(&d.levels) {
                let e = counts.get_mut(&d.path[l as usize]).expect("checked above");
                e.0[w as usize] += 1;
                e.1 += 1;
            }
        }
        self.nodes.iter().all(|(k, n)| {
            let (wc, t, c) = &counts[k];
            &n.word_counts == wc && n.total == *t && n.customers == *c && n.word_counts.iter().map(|&x| x as u64).sum::<u64>() == n.total
        })
    }

    /// Single root, consistent parent/child links and levels, no empty
    /// non-root node, every document path a root-to-leaf chain of retained
    /// nodes.
    pub fn validate_tree(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Checkpoint(m));
        let roots: Vec<_> = self.nodes.values().filter(|n| n.parent.is_none()).collect();
        if roots.len() != 1 || roots[0].id != 0 {
            return bad(format!("expected a single root, found {}", roots.len()));
        }
        for n in self.nodes.values() {
            if let Some(p) = n.parent {
                let Some(parent) = self.nodes.get(&p) else { return bad(format!("node {} has missing parent {p}", n.id)) };
                if parent.level + 1 != n.level || !parent.children.contains(&n.id) {
                    return bad(format!("node {} is inconsistently linked to {p}", n.id));
                }
                if n.customers == 0 {
                    return bad(format!("node {} has no documents", n.id));
                }
            }
            for c in &n.children {
                if self.nodes.get(c).and_then(|c| c.parent) != Some(n.id) {
                    return bad(format!("child {c} of {} does not point back", n.id));
                }
            }
        }
        for d in &self.docs {
            if d.path.len() != self.config.depth || d.path[0] != 0 {
                return bad(format!("document {} has a malformed path", d.id));
            }
            for w in d.path.windows(2) {
                if self.nodes.get(&w[1]).and_then(|n| n.parent) != Some(w[0]) {
                    return bad(format!("document {} path breaks at node {}", d.id, w[1]));
                }
            }
        }
        Ok(())
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    id: usize,
    level: usize,
    parent: Option<usize>,
    children: Vec<usize>,
    total: u64,
    customers: usize,
    /// Sparse `(token, count)` pairs.
    counts: Vec<(u32, u32)>,
}

#[derive(Serialize, Deserialize)]
struct StateRecord {
    version: u32,
    config: HldaConfig,
    vocab_size: usize,
    next_id: usize,
    iteration: usize,
    rng_word_pos: u128,
    nodes: Vec<NodeRecord>,
    docs: Vec<DocAssignment>,
}

/// Topic-model checkpoint: vocabulary plus sampler state.
#[derive(Serialize, Deserialize)]
struct CheckpointRecord {
    vocabulary: Vocabulary,
    state: StateRecord,
}

impl HldaState {
    fn to_record(&self) -> StateRecord {
        StateRecord {
            version: CHECKPOINT_VERSION,
            config: self.config,
            vocab_size: self.vocab_size,
            next_id: self.next_id,
            iteration: self.iteration,
            rng_word_pos: self.rng.get_word_pos(),
            nodes: self
                .nodes
                .values()
                .map(|n| NodeRecord {
                    id: n.id,
                    level: n.level,
                    parent: n.parent,
                    children: n.children.clone(),
                    total: n.total,
                    customers: n.customers,
                    counts: n.word_counts.iter().enumerate().filter(|(_, &c)| c > 0).map(|(w, &c)| (w as u32, c)).collect(),
                })
                .collect(),
            docs: self.docs.clone(),
        }
    }

    fn from_record(r: StateRecord) -> Result<Self> {
        if r.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported topic checkpoint version {}", r.version)));
        }
        let mut nodes = BTreeMap::new();
        for n in r.nodes {
            let mut word_counts = vec![0; r.vocab_size];
            for (w, c) in n.counts {
                *word_counts
                    .get_mut(w as usize)
                    .ok_or_else(|| Error::Checkpoint(format!("token {w} outside vocabulary")))? = c;
            }
            nodes.insert(
                n.id,
                TopicNode { id: n.id, level: n.level, parent: n.parent, children: n.children, word_counts, total: n.total, customers: n.customers },
            );
        }
        let mut rng = ChaCha8Rng::seed_from_u64(r.config.seed);
        rng.set_word_pos(r.rng_word_pos);
        let doc_index = r.docs.iter().enumerate().map(|(i, d)| (d.id.clone(), i)).collect();
        let state = Self {
            config: r.config,
            vocab_size: r.vocab_size,
            nodes,
            next_id: r.next_id,
            docs: r.docs,
            doc_index,
            iteration: r.iteration,
            rng,
        };
        state.validate_tree()?;
        if !state.recount_matches() {
            return Err(Error::Checkpoint("stored counts disagree with assignments".into()));
        }
        Ok(state)
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, vocab: &Vocabulary, state: &HldaState) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let record = CheckpointRecord { vocabulary: vocab.clone(), state: state.to_record() };
    serde_json::to_writer(BufWriter::new(f), &record)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Vocabulary, HldaState)> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let record: CheckpointRecord = serde_json::from_reader(BufReader::new(f))?;
    let state = HldaState::from_record(record.state)?;
    if state.vocab_size != record.vocabulary.len() {
        return Err(Error::Checkpoint("vocabulary size does not match the sampler state".into()));
    }
    Ok((record.vocabulary, state))
}

/// Hex SHA-256 of a file, used to tie downstream artifacts to the topic model
/// they were built from.
pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Majority-label purity of the level-`level` assignment: `Σ_node max_label
/// count / N`.
pub fn assignment_purity(state: &HldaState, labels: &BTreeMap<String, usize>, level: usize) -> f64 {
    let mut table: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    let mut n = 0;
    for d in state.documents() {
        if let Some(&label) = labels.get(&d.id) {
            *table.entry(d.path[level]).or_default().entry(label).or_default() += 1;
            n += 1;
        }
    }
    if n == 0 {
        return 0.0;
    }
    table.values().map(|m| m.values().copied().max().unwrap_or(0)).sum::<usize>() as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, tokenize, SyntheticConfig};

    fn doc(id: &str, text: &str) -> Document {
        Document {
            id: id.into(),
            title: tokenize(text),
            abstract_text: tokenize(text),
            categories: ["x".to_string()].into(),
        }
    }

    fn small_corpus() -> (Vec<Document>, Vocabulary) {
        let cfg = SyntheticConfig { num_topics: 3, docs_per_topic: 10, vocab_size: 90, doc_length: 12, title_length: 3, seed: 3, ..Default::default() };
        let docs = generate_synthetic_corpus(&cfg).unwrap();
        let v = Vocabulary::build(&docs, 1).unwrap();
        (docs, v)
    }

    #[test]
    fn config_errors() {
        let (docs, v) = small_corpus();
        let cfg = HldaConfig { depth: 1, ..Default::default() };
        assert!(fit_hlda(&docs, &v, cfg).is_err());
        assert!(matches!(fit_hlda(&[], &v, HldaConfig::default()), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn single_document_is_a_single_path() {
        let d = doc("a", "graph node edge graph");
        let v = Vocabulary::build(&[d.clone()], 1).unwrap();
        let s = fit_hlda(&[d], &v, HldaConfig { iterations: 20, ..Default::default() }).unwrap();
        assert_eq!(s.num_topics(), 3);
        s.validate_tree().unwrap();
    }

    #[test]
    fn determinism_and_consistency() {
        let (docs, v) = small_corpus();
        let cfg = HldaConfig { iterations: 15, seed: 11, ..Default::default() };
        let a = fit_hlda(&docs, &v, cfg).unwrap();
        let b = fit_hlda(&docs, &v, cfg).unwrap();
        assert_eq!(a.documents(), b.documents());
        assert_eq!(a.nodes().collect::<Vec<_>>(), b.nodes().collect::<Vec<_>>());
        assert!(a.recount_matches());
        a.validate_tree().unwrap();
    }

    #[test]
    fn distribution_count_ratio() {
        let d = doc("a", "aa bb cc dd");
        let v = Vocabulary::build(&[d.clone()], 1).unwrap();
        let mut s = fit_hlda(&[d], &v, HldaConfig { depth: 2, iterations: 1, ..Default::default() }).unwrap();
        // Force three words onto the leaf and one onto the root.
        for n in s.nodes.values_mut() {
            n.word_counts.iter_mut().for_each(|c| *c = 0);
            n.total = 0;
            n.customers = 0;
        }
        s.docs[0].levels = vec![1, 1, 1, 0, 1, 1, 1, 0];
        s.add_doc(0);
        assert!(s.recount_matches());
        let dist = s.doc_topic_distribution_with("a", 0.0, 0.0).unwrap();
        let path = &s.documents()[0].path;
        assert!((dist.component(path[1]).unwrap() - 0.75).abs() < 1e-12);
        assert!((dist.component(path[0]).unwrap() - 0.25).abs() < 1e-12);
        assert!(matches!(s.doc_topic_distribution("zz"), Err(Error::UnknownDocument(_))));
    }

    #[test]
    fn prompt_topic_selection_order() {
        let (docs, v) = small_corpus();
        let s = fit_hlda(&docs, &v, HldaConfig { iterations: 10, ..Default::default() }).unwrap();
        match s.select_prompt_topics(1) {
            Ok(ids) => {
                let c: Vec<usize> = ids.iter().map(|i| s.node(*i).unwrap().customers).collect();
                assert!(c.windows(2).all(|w| w[0] >= w[1]));
            }
            Err(e) => assert!(matches!(e, Error::InvalidArgument(_))),
        }
        assert!(s.select_prompt_topics(0).is_err());
        assert!(s.select_prompt_topics(3).is_err());

        let one = doc("a", "aa bb");
        let v1 = Vocabulary::build(&[one.clone()], 1).unwrap();
        let s1 = fit_hlda(&[one], &v1, HldaConfig { iterations: 2, ..Default::default() }).unwrap();
        assert!(s1.select_prompt_topics(1).is_err());
    }

    #[test]
    fn top_words_ranking() {
        let d = doc("a", "zz");
        let v = Vocabulary::build(&[d.clone()], 1).unwrap();
        let mut s = fit_hlda(&[d], &v, HldaConfig { iterations: 1, ..Default::default() }).unwrap();
        let leaf = s.documents()[0].path[2];
        let n = s.nodes.get_mut(&leaf).unwrap();
        n.word_counts = vec![0; n.word_counts.len()];
        n.word_counts[2] = 10;
        n.total = 10;
        let t = s.top_words(leaf, 1).unwrap();
        assert_eq!(t.words, vec![2]);
        let t = s.top_words(leaf, 50).unwrap();
        assert_eq!(t.words.len(), 1);
        assert!(matches!(s.top_words(999, 1), Err(Error::UnknownTopic(999))));
    }

    #[test]
    fn checkpoint_resumes_identically() {
        let (docs, v) = small_corpus();
        let cfg = HldaConfig { iterations: 5, seed: 2, ..Default::default() };
        let mut a = fit_hlda(&docs, &v, cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("topics.json");
        save_checkpoint(&p, &v, &a).unwrap();
        let (v2, mut b) = load_checkpoint(&p).unwrap();
        assert_eq!(v, v2);
        for _ in 0..3 {
            a.sweep();
            b.sweep();
        }
        assert_eq!(a.documents(), b.documents());
        assert_eq!(a.nodes().collect::<Vec<_>>(), b.nodes().collect::<Vec<_>>());
    }
}
