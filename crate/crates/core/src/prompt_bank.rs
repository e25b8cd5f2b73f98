//! Topic prompts: a residual prompt encoder over topic words, prompt
//! assignment by dominant topic, and the shared prefix matrix that turns a
//! prompt into per-layer attention keys and values.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{EncoderParams, LayerPrefixes, PrefixVars, INIT_STD};
use crate::error::{Error, Result};
use crate::params::{param_group, SlotAlloc};
use crate::tensor::Matrix;
use crate::topic_model::{HldaState, TopicDistribution, TopicWordSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Continuous tokens per prompt.
    pub prompt_len: usize,
    /// Number of residual blocks in the prompt encoder.
    pub depth: usize,
    /// Topic words drawn per prompt.
    pub top_words: usize,
    /// Tree level the prompt topics come from.
    pub level: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self { prompt_len: 8, depth: 1, top_words: 20, level: 1 }
    }
}

param_group! {
    /// `x + x·weight + bias`.
    ResidualBlock / ResidualVars { weight, bias }
}

param_group! {
    /// `dim × (num·2·dim)`; columns `[2ℓ·dim, (2ℓ+1)·dim)` feed layer ℓ's keys,
    /// the next `dim` columns its values.
    PrefixMatrix / PrefixMatrixVars { weight }
}

/// A topic prompt: `p × dim` continuous token rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptVector {
    pub topic: usize,
    pub rows: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEncoderParams {
    pub word_embeddings: Matrix,
    pub blocks: Vec<ResidualBlock>,
    pub prompt_len: usize,
}

impl PromptEncoderParams {
    /// Copies the encoder's token embeddings; residual blocks start at zero.
    pub fn from_encoder(encoder: &EncoderParams, prompt_len: usize, depth: usize) -> Result<Self> {
        if prompt_len == 0 {
            return Err(Error::InvalidArgument("prompt length must be at least 1".into()));
        }
        let dim = encoder.config.dim;
        let blocks = (0..depth).map(|_| ResidualBlock { weight: Matrix::zeros(dim, dim), bias: Matrix::zeros(1, dim) }).collect();
        Ok(Self { word_embeddings: encoder.embeddings.token.clone(), blocks, prompt_len })
    }

    pub fn dim(&self) -> usize {
        self.word_embeddings.cols()
    }

    /// Row ids of the prompt: the first `p` words, cycling when there are
    /// fewer than `p`.
    pub fn word_rows(&self, words: &TopicWordSet) -> Result<Vec<usize>> {
        if words.words.is_empty() {
            return Err(Error::InvalidArgument(format!("topic {} has no words to build a prompt from", words.topic)));
        }
        let rows: Vec<usize> = words.words.iter().cycle().take(self.prompt_len).map(|&w| w as usize).collect();
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.word_embeddings.rows()) {
            return Err(Error::Shape(format!("word id {bad} outside a {}-row embedding table", self.word_embeddings.rows())));
        }
        Ok(rows)
    }

    pub fn encode_prompt(&self, words: &TopicWordSet) -> Result<PromptVector> {
        let rows = self.word_rows(words)?;
        let data = rows.iter().flat_map(|&r| self.word_embeddings.row(r).iter().copied()).collect();
        let mut x = Matrix::from_vec(rows.len(), self.dim(), data)?;
        for block in &self.blocks {
            let mut lin = x.matmul(&block.weight);
            for r in 0..lin.rows() {
                for (v, b) in lin.row_mut(r).iter_mut().zip(block.bias.row(0)) {
                    *v += b;
                }
            }
            x.add_assign(&lin);
        }
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("prompt for topic {}", words.topic)));
        }
        Ok(PromptVector { topic: words.topic, rows: x })
    }
}

impl PrefixMatrix {
    pub fn init<R: Rng + ?Sized>(dim: usize, num_layers: usize, rng: &mut R) -> Self {
        Self { weight: Matrix::random_normal(dim, num_layers * 2 * dim, INIT_STD, rng) }
    }

    pub fn num_layers(&self) -> usize {
        let dim = self.weight.rows();
        if dim == 0 {
            0
        } else {
            self.weight.cols() / (2 * dim)
        }
    }
}

/// Splits `p × (num·2·dim)` into per-layer key/value blocks.
fn split_layers(projected: &Matrix, dim: usize, num_layers: usize) -> LayerPrefixes {
    LayerPrefixes {
        layers: (0..num_layers)
            .map(|l| {
                let k = projected.slice_cols(2 * l * dim, (2 * l + 1) * dim);
                let v = projected.slice_cols((2 * l + 1) * dim, (2 * l + 2) * dim);
                (k, v)
            })
            .collect(),
    }
}

pub fn project_prefix(m: &PrefixMatrix, prompt: &PromptVector) -> Result<LayerPrefixes> {
    let dim = m.weight.rows();
    if prompt.rows.cols() != dim || dim == 0 || m.weight.cols() % (2 * dim) != 0 {
        return Err(Error::Shape(format!(
            "prompt {:?} cannot be projected by a {:?} prefix matrix",
            prompt.rows.shape(),
            m.weight.shape()
        )));
    }
    let projected = prompt.rows.matmul(&m.weight);
    Ok(split_layers(&projected, dim, m.num_layers()))
}

/// Index into `prompt_topics` of the largest component; equal components go
/// to the lowest topic id.
pub fn assign_prompt(theta: &TopicDistribution, prompt_topics: &[usize]) -> Result<usize> {
    let mut best: Option<(usize, usize, f64)> = None;
    for (i, &t) in prompt_topics.iter().enumerate() {
        let c = theta.component(t).ok_or(Error::UnknownTopic(t))?;
        let better = match best {
            None => true,
            Some((_, bt, bc)) => c > bc || (c == bc && t < bt),
        };
        if better {
            best = Some((i, t, c));
        }
    }
    best.map(|b| b.0).ok_or_else(|| Error::InvalidArgument("no prompt topics to assign from".into()))
}

/// Prompt encoder, prefix matrix and the topic words behind each prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBank {
    pub config: PromptConfig,
    pub encoder: PromptEncoderParams,
    pub prefix: PrefixMatrix,
    /// The K_s prompt topics, in prompt-index order.
    pub topics: Vec<usize>,
    pub topic_words: Vec<TopicWordSet>,
    /// Hash of the topic checkpoint the bank was built from, if any.
    pub topic_checkpoint: Option<String>,
}

#[derive(Debug, Clone)]
pub struct PromptBankVars {
    pub word_embeddings: Var,
    pub blocks: Vec<ResidualVars>,
    pub prefix: Var,
}

impl PromptBank {
    pub fn build<R: Rng + ?Sized>(
        state: &HldaState,
        encoder: &EncoderParams,
        config: PromptConfig,
        topic_checkpoint: Option<String>,
        rng: &mut R,
    ) -> Result<Self> {
        let topics = state.select_prompt_topics(config.level)?;
        let topic_words = topics.iter().map(|&t| state.top_words(t, config.top_words)).collect::<Result<Vec<_>>>()?;
        Self::from_topic_words(encoder, config, topics, topic_words, topic_checkpoint, rng)
    }

    pub fn from_topic_words<R: Rng + ?Sized>(
        encoder: &EncoderParams,
        config: PromptConfig,
        topics: Vec<usize>,
        topic_words: Vec<TopicWordSet>,
        topic_checkpoint: Option<String>,
        rng: &mut R,
    ) -> Result<Self> {
        if topics.len() != topic_words.len() || topics.is_empty() {
            return Err(Error::InvalidArgument(format!("{} topics but {} word sets", topics.len(), topic_words.len())));
        }
        let bank = Self {
            config,
            encoder: PromptEncoderParams::from_encoder(encoder, config.prompt_len, config.depth)?,
            prefix: PrefixMatrix::init(encoder.config.dim, encoder.config.num_layers, rng),
            topics,
            topic_words,
            topic_checkpoint,
        };
        for w in &bank.topic_words {
            bank.encoder.word_rows(w)?;
        }
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.topics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.topics.is_empty()
    }

    pub fn prompt(&self, index: usize) -> Result<PromptVector> {
        let words = self.topic_words.get(index).ok_or(Error::InvalidArgument(format!("no prompt {index}")))?;
        self.encoder.encode_prompt(words)
    }

    pub fn layer_prefixes(&self, index: usize) -> Result<LayerPrefixes> {
        project_prefix(&self.prefix, &self.prompt(index)?)
    }

    pub fn assign(&self, theta: &TopicDistribution) -> Result<usize> {
        assign_prompt(theta, &self.topics)
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("prompt.word_embeddings".to_string(), &self.encoder.word_embeddings)];
        for (i, b) in self.encoder.blocks.iter().enumerate() {
            out.extend(ResidualBlock::FIELDS.iter().zip(b.tensors()).map(|(n, t)| (format!("prompt.block{i}.{n}"), t)));
        }
        out.push(("prompt.prefix_matrix".to_string(), &self.prefix.weight));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.encoder.word_embeddings];
        for b in &mut self.encoder.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.prefix.weight);
        out
    }

    pub fn bind(&self, tape: &mut Tape, slots: &mut SlotAlloc) -> PromptBankVars {
        PromptBankVars {
            word_embeddings: slots.bind(tape, &self.encoder.word_embeddings),
            blocks: self.encoder.blocks.iter().map(|b| b.bind(tape, slots)).collect(),
            prefix: slots.bind(tape, &self.prefix.weight),
        }
    }

    /// Per-layer prefixes for prompt `index`, built on the tape.
    pub fn prefixes_on_tape(&self, tape: &mut Tape, vars: &PromptBankVars, index: usize) -> Result<Vec<PrefixVars>> {
        let words = self.topic_words.get(index).ok_or(Error::InvalidArgument(format!("no prompt {index}")))?;
        let rows = self.encoder.word_rows(words)?;
        let mut x = tape.gather(vars.word_embeddings, &rows)?;
        for b in &vars.blocks {
            let lin = tape.matmul(x, b.weight);
            let lin = tape.add_row(lin, b.bias);
            x = tape.add(x, lin);
        }
        tape.set_label(x, format!("prompt{index}"));
        let projected = tape.matmul(x, vars.prefix);
        let dim = self.encoder.dim();
        Ok((0..self.prefix.num_layers())
            .map(|l| {
                let k = tape.slice_cols(projected, 2 * l * dim, (2 * l + 1) * dim);
                let v = tape.slice_cols(projected, (2 * l + 1) * dim, (2 * l + 2) * dim);
                (k, v)
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder() -> EncoderParams {
        let cfg = EncoderConfig { dim: 8, num_layers: 2, heads: 2, ff_dim: 16, max_len: 10, vocab_size: 30 };
        EncoderParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    fn words(topic: usize, ids: &[u32]) -> TopicWordSet {
        TopicWordSet { topic, words: ids.to_vec(), probabilities: vec![0.1; ids.len()] }
    }

    #[test]
    fn zero_residual_reproduces_embeddings_and_cycles() {
        let enc = encoder();
        let pe = PromptEncoderParams::from_encoder(&enc, 5, 1).unwrap();
        let p = pe.encode_prompt(&words(3, &[4, 7])).unwrap();
        assert_eq!(p.rows.shape(), (5, 8));
        for (r, w) in [4, 7, 4, 7, 4].into_iter().enumerate() {
            assert_eq!(p.rows.row(r), enc.embeddings.token.row(w));
        }
        assert!(pe.encode_prompt(&words(3, &[])).is_err());
    }

    #[test]
    fn perturbing_one_word_moves_one_row() {
        let enc = encoder();
        let mut pe = PromptEncoderParams::from_encoder(&enc, 4, 1).unwrap();
        let ws = words(0, &[2, 3, 4, 5, 6, 7]);
        let before = pe.encode_prompt(&ws).unwrap();
        pe.word_embeddings.row_mut(4)[1] += 0.5;
        let after = pe.encode_prompt(&ws).unwrap();
        for r in 0..4 {
            let changed = before.rows.row(r) != after.rows.row(r);
            assert_eq!(changed, r == 2);
        }
        assert!((after.rows.get(2, 1) - before.rows.get(2, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn assignment_rules() {
        let theta = TopicDistribution { doc_id: "d".into(), topic_ids: vec![1, 2, 3, 4], components: vec![0.0, 0.1, 0.7, 0.2] };
        assert_eq!(assign_prompt(&theta, &[2, 3, 4]).unwrap(), 1);
        let flat = TopicDistribution { doc_id: "d".into(), topic_ids: vec![1, 2, 3], components: vec![1.0 / 3.0; 3] };
        assert_eq!(assign_prompt(&flat, &[3, 1, 2]).unwrap(), 1);
        assert!(matches!(assign_prompt(&theta, &[9]), Err(Error::UnknownTopic(9))));
    }

    #[test]
    fn prefix_projection_shapes_and_hand_matrix() {
        let (dim, num, p) = (8, 2, 4);
        let m = PrefixMatrix { weight: Matrix::zeros(dim, num * 2 * dim) };
        let prompt = PromptVector { topic: 0, rows: Matrix::random_normal(p, dim, 1.0, &mut ChaCha8Rng::seed_from_u64(1)) };
        let zero = project_prefix(&m, &prompt).unwrap();
        assert_eq!(zero.layers.len(), 2);
        for (k, v) in &zero.layers {
            assert_eq!(k.shape(), (4, 8));
            assert!(k.data().iter().chain(v.data()).all(|&x| x == 0.0));
        }
        let mut m = m;
        for i in 0..dim {
            m.weight.set(i, i, 1.0);
        }
        let out = project_prefix(&m, &prompt).unwrap();
        assert_eq!(out.layers[0].0, prompt.rows);
        assert!(out.layers[0].1.data().iter().chain(out.layers[1].0.data()).chain(out.layers[1].1.data()).all(|&x| x == 0.0));
        let bad = PromptVector { topic: 0, rows: Matrix::zeros(2, 3) };
        assert!(matches!(project_prefix(&m, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn tape_prefixes_match_plain_projection() {
        let enc = encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = PromptConfig { prompt_len: 3, depth: 2, ..PromptConfig::default() };
        let mut bank = PromptBank::from_topic_words(&enc, cfg, vec![1, 2], vec![words(1, &[3, 4]), words(2, &[5])], None, &mut rng).unwrap();
        for b in &mut bank.encoder.blocks {
            b.weight = Matrix::random_normal(8, 8, 0.3, &mut rng);
            b.bias = Matrix::random_normal(1, 8, 0.3, &mut rng);
        }
        let plain = bank.layer_prefixes(1).unwrap();
        let mut tape = Tape::new();
        let vars = bank.bind(&mut tape, &mut SlotAlloc::new());
        let taped = bank.prefixes_on_tape(&mut tape, &vars, 1).unwrap();
        for ((k, v), (tk, tv)) in plain.layers.iter().zip(taped) {
            assert!(k.max_abs_diff(tape.value(tk)) < 1e-14);
            assert!(v.max_abs_diff(tape.value(tv)) < 1e-14);
        }
    }
}
