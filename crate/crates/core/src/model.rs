//! The trainable model: encoder plus optional prompt bank, with a single flat
//! tensor order shared by gradients, the optimizer and checkpoints.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{encode_on_tape, EncoderParams, EncoderVars, PrefixVars};
use crate::error::{Error, Result};
use crate::params::SlotAlloc;
use crate::prompt_bank::{PromptBank, PromptBankVars};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub encoder: EncoderParams,
    pub prompts: Option<PromptBank>,
}

/// A model bound to a tape. Prompt prefixes are built lazily, once per
/// prompt.
pub struct BoundModel<'m> {
    model: &'m Model,
    pub encoder: EncoderVars,
    pub prompts: Option<PromptBankVars>,
    prefixes: Vec<Option<Vec<PrefixVars>>>,
}

impl<'m> BoundModel<'m> {
    pub fn prefixes(&mut self, tape: &mut Tape, prompt: usize) -> Result<Vec<PrefixVars>> {
        let (bank, vars) = match (&self.model.prompts, &self.prompts) {
            (Some(b), Some(v)) => (b, v),
            _ => return Err(Error::InvalidArgument(format!("prompt {prompt} requested from a model without prompts"))),
        };
        if prompt >= self.prefixes.len() {
            return Err(Error::InvalidArgument(format!("prompt {prompt} out of range for {} prompts", self.prefixes.len())));
        }
        if self.prefixes[prompt].is_none() {
            self.prefixes[prompt] = Some(bank.prefixes_on_tape(tape, vars, prompt)?);
        }
        Ok(self.prefixes[prompt].clone().unwrap_or_default())
    }

    /// `[CLS]` output for `tokens`, prefixed by `prompt` when given.
    pub fn encode(&mut self, tape: &mut Tape, tokens: &[u32], prompt: Option<usize>) -> Result<Var> {
        let prefixes = match prompt {
            Some(k) => Some(self.prefixes(tape, k)?),
            None => None,
        };
        Ok(encode_on_tape(tape, &self.encoder, tokens, prefixes.as_deref())?.0)
    }
}

impl Model {
    pub fn new(encoder: EncoderParams, prompts: Option<PromptBank>) -> Self {
        Self { encoder, prompts }
    }

    pub fn num_prompts(&self) -> usize {
        self.prompts.as_ref().map_or(0, |p| p.len())
    }

    /// Every trainable tensor with its name, encoder first.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.encoder.tensors();
        if let Some(p) = &self.prompts {
            out.extend(p.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.encoder.tensors_mut();
        if let Some(p) = &mut self.prompts {
            out.extend(p.tensors_mut());
        }
        out
    }

    /// Number of leading tensors that belong to the encoder.
    pub fn encoder_tensor_count(&self) -> usize {
        self.encoder.tensors().len()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel<'_> {
        let mut slots = SlotAlloc::new();
        let encoder = self.encoder.bind(tape, &mut slots);
        let prompts = self.prompts.as_ref().map(|p| p.bind(tape, &mut slots));
        debug_assert_eq!(slots.used(), self.tensors().len());
        BoundModel { model: self, encoder, prompts, prefixes: vec![None; self.num_prompts()] }
    }

    /// Evaluates `loss` on a fresh tape and returns its value with one
    /// gradient per tensor, in [`Model::tensors`] order.
    pub fn value_and_gradient<F>(&self, loss: F) -> Result<(f64, Vec<Matrix>)>
    where
        F: FnOnce(&mut Tape, &mut BoundModel<'_>) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let mut bound = self.bind(&mut tape);
        let out = loss(&mut tape, &mut bound)?;
        let (value, grads) = tape.value_and_gradient(out)?;
        let grads = self
            .tensors()
            .iter()
            .enumerate()
            .map(|(key, (_, t))| grads.param(key, t.shape()).unwrap_or_else(|| Matrix::zeros(t.rows(), t.cols())))
            .collect();
        Ok((value, grads))
    }

    /// Forward-only encoding of many texts on one shared binding.
    pub fn encode_batch(&self, texts: &[(&[u32], Option<usize>)]) -> Result<Vec<(Vec<f64>, bool)>> {
        let mut tape = Tape::new();
        let mut bound = self.bind(&mut tape);
        let mut out = Vec::with_capacity(texts.len());
        for &(tokens, prompt) in texts {
            let prefixes = match prompt {
                Some(k) => Some(bound.prefixes(&mut tape, k)?),
                None => None,
            };
            let mark = tape.len();
            let (v, truncated) = encode_on_tape(&mut tape, &bound.encoder, tokens, prefixes.as_deref())?;
            let row = tape.value(v).row(0).to_vec();
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("encoder output".into()));
            }
            out.push((row, truncated));
            tape.truncate(mark);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{encode, EncoderConfig};
    use crate::prompt_bank::PromptConfig;
    use crate::topic_model::TopicWordSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = EncoderConfig { dim: 8, num_layers: 2, heads: 2, ff_dim: 16, max_len: 12, vocab_size: 20 };
        let enc = EncoderParams::init(cfg, &mut rng).unwrap();
        let words = |t: usize, w: &[u32]| TopicWordSet { topic: t, words: w.to_vec(), probabilities: vec![0.5; w.len()] };
        let pc = PromptConfig { prompt_len: 2, ..PromptConfig::default() };
        let bank = PromptBank::from_topic_words(&enc, pc, vec![3, 4], vec![words(3, &[2, 3]), words(4, &[5, 6])], None, &mut rng).unwrap();
        Model::new(enc, Some(bank))
    }

    #[test]
    fn batch_encoding_matches_single_encoding() {
        let m = model();
        let toks: [&[u32]; 2] = [&[2, 3, 4], &[7, 8]];
        let out = m.encode_batch(&[(toks[0], Some(1)), (toks[1], None), (toks[0], Some(0))]).unwrap();
        let pre = m.prompts.as_ref().unwrap().layer_prefixes(1).unwrap();
        let (single, _) = encode(&m.encoder, toks[0], Some(&pre)).unwrap();
        let diff = out[0].0.iter().zip(&single).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-13);
        assert_eq!(out[1].0, encode(&m.encoder, toks[1], None).unwrap().0);
        assert_ne!(out[0].0, out[2].0);
    }

    #[test]
    fn gradients_follow_tensor_order() {
        let m = model();
        let (v, g) = m
            .value_and_gradient(|tape, b| {
                let x = b.encode(tape, &[2, 3], Some(0))?;
                Ok(tape.sum_squares(x))
            })
            .unwrap();
        assert!(v > 0.0);
        let names = m.tensors();
        assert_eq!(g.len(), names.len());
        for ((_, t), gr) in names.iter().zip(&g) {
            assert_eq!(t.shape(), gr.shape());
        }
        // Prompt 1 is never used, but the shared tables still receive
        // gradient through prompt 0.
        let last = names.iter().position(|(n, _)| n == "prompt.prefix_matrix").unwrap();
        assert!(g[last].sum_squares() > 0.0);
    }
}
