//! Post-norm transformer encoder whose attention layers accept per-layer
//! prefix keys and values.
//!
//! Queries come from the input rows only; keys and values are the prefix rows
//! followed by the input rows. The representation of a text is the output at
//! position 0, which always holds the `[CLS]` token.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::corpus::CLS_ID;
use crate::error::{Error, Result};
use crate::params::{param_group, SlotAlloc};
use crate::tensor::Matrix;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub num_layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Includes the `[CLS]` position.
    pub max_len: usize,
    pub vocab_size: usize,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self { dim: 64, num_layers: 2, heads: 4, ff_dim: 256, max_len: 64, vocab_size }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.dim, self.num_layers, self.heads, self.ff_dim, self.max_len, self.vocab_size];
        if all.contains(&0) {
            return Err(Error::InvalidArgument(format!("encoder sizes must be positive: {self:?}")));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

param_group! {
    /// One transformer layer: attention projections, post-attention norm,
    /// feed-forward block, post-feed-forward norm.
    LayerParams / LayerVars {
        wq, bq, wk, bk, wv, bv, wo, bo, ln1_gain, ln1_offset, w1, b1, w2, b2, ln2_gain, ln2_offset,
    }
}

param_group! {
    EmbeddingParams / EmbeddingVars { token, position }
}

impl LayerParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, ff: usize, rng: &mut R) -> Self {
        let w = |r, c, rng: &mut R| Matrix::random_normal(r, c, INIT_STD, rng);
        Self {
            wq: w(dim, dim, rng),
            bq: Matrix::zeros(1, dim),
            wk: w(dim, dim, rng),
            bk: Matrix::zeros(1, dim),
            wv: w(dim, dim, rng),
            bv: Matrix::zeros(1, dim),
            wo: w(dim, dim, rng),
            bo: Matrix::zeros(1, dim),
            ln1_gain: Matrix::filled(1, dim, 1.0),
            ln1_offset: Matrix::zeros(1, dim),
            w1: w(dim, ff, rng),
            b1: Matrix::zeros(1, ff),
            w2: w(ff, dim, rng),
            b2: Matrix::zeros(1, dim),
            ln2_gain: Matrix::filled(1, dim, 1.0),
            ln2_offset: Matrix::zeros(1, dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub embeddings: EmbeddingParams,
    pub layers: Vec<LayerParams>,
}

#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub config: EncoderConfig,
    pub embeddings: EmbeddingVars,
    pub layers: Vec<LayerVars>,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let embeddings = EmbeddingParams {
            token: Matrix::random_normal(config.vocab_size, config.dim, INIT_STD, rng),
            position: Matrix::random_normal(config.max_len, config.dim, INIT_STD, rng),
        };
        let layers = (0..config.num_layers).map(|_| LayerParams::init(config.dim, config.ff_dim, rng)).collect();
        Ok(Self { config, embeddings, layers })
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = EmbeddingParams::FIELDS
            .iter()
            .zip(self.embeddings.tensors())
            .map(|(n, t)| (format!("encoder.embeddings.{n}"), t))
            .collect();
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(LayerParams::FIELDS.iter().zip(l.tensors()).map(|(n, t)| (format!("encoder.layer{i}.{n}"), t)));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.embeddings.tensors_mut();
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape, slots: &mut SlotAlloc) -> EncoderVars {
        EncoderVars {
            config: self.config,
            embeddings: self.embeddings.bind(tape, slots),
            layers: self.layers.iter().map(|l| l.bind(tape, slots)).collect(),
        }
    }
}

/// Prefix key and value rows for one layer, each `p × dim`.
pub type PrefixVars = (Var, Var);

/// Multi-head attention of `hidden` (`n × dim`) over `[prefix; hidden]`,
/// followed by the output projection.
pub fn attend_with_prefix(
    tape: &mut Tape,
    layer: &LayerVars,
    hidden: Var,
    prefix: Option<PrefixVars>,
    heads: usize,
) -> Result<Var> {
    let dim = tape.value(hidden).cols();
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Shape(format!("{dim} columns cannot be split into {heads} heads")));
    }
    if let Some((k, v)) = prefix {
        let (ks, vs) = (tape.value(k).shape(), tape.value(v).shape());
        if ks != vs || (ks.0 > 0 && ks.1 != dim) {
            return Err(Error::Shape(format!("prefix keys {ks:?} / values {vs:?} do not fit hidden size {dim}")));
        }
    }
    let q = tape.matmul(hidden, layer.wq);
    let q = tape.add_row(q, layer.bq);
    let k_in = tape.matmul(hidden, layer.wk);
    let k_in = tape.add_row(k_in, layer.bk);
    let v_in = tape.matmul(hidden, layer.wv);
    let v_in = tape.add_row(v_in, layer.bv);
    let (k, v) = match prefix {
        Some((kp, vp)) if tape.value(kp).rows() > 0 => (tape.vstack(&[kp, k_in])?, tape.vstack(&[vp, v_in])?),
        _ => (k_in, v_in),
    };
    let hd = dim / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (a, b) = (h * hd, (h + 1) * hd);
        let qh = tape.slice_cols(q, a, b);
        let kh = tape.slice_cols(k, a, b);
        let vh = tape.slice_cols(v, a, b);
        let scores = tape.matmul_bt(qh, kh);
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scores);
        outs.push(tape.matmul(weights, vh));
    }
    let joined = if heads == 1 { outs[0] } else { tape.hstack(&outs)? };
    let out = tape.matmul(joined, layer.wo);
    Ok(tape.add_row(out, layer.bo))
}

/// Token ids with `[CLS]` prepended, cut to `max_len`. The flag reports
/// truncation.
pub fn prepare_tokens(tokens: &[u32], max_len: usize) -> (Vec<usize>, bool) {
    let mut ids: Vec<usize> = std::iter::once(CLS_ID as usize).chain(tokens.iter().map(|&t| t as usize)).collect();
    let truncated = ids.len() > max_len;
    ids.truncate(max_len);
    (ids, truncated)
}

/// Full encoder pass on the tape; returns the `1 × dim` `[CLS]` output and
/// the truncation flag.
pub fn encode_on_tape(
    tape: &mut Tape,
    enc: &EncoderVars,
    tokens: &[u32],
    prefixes: Option<&[PrefixVars]>,
) -> Result<(Var, bool)> {
    let cfg = enc.config;
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("cannot encode an empty token sequence".into()));
    }
    if let Some(p) = prefixes {
        if p.len() != cfg.num_layers {
            return Err(Error::Shape(format!("{} prefix layers for a {}-layer encoder", p.len(), cfg.num_layers)));
        }
    }
    let (ids, truncated) = prepare_tokens(tokens, cfg.max_len);
    let positions: Vec<usize> = (0..ids.len()).collect();
    let tok = tape.gather(enc.embeddings.token, &ids)?;
    let pos = tape.gather(enc.embeddings.position, &positions)?;
    let mut h = tape.add(tok, pos);
    for (i, layer) in enc.layers.iter().enumerate() {
        let prefix = prefixes.map(|p| p[i]);
        let attn = attend_with_prefix(tape, layer, h, prefix, cfg.heads)?;
        let res = tape.add(h, attn);
        h = tape.layer_norm(res, layer.ln1_gain, layer.ln1_offset);
        let f = tape.matmul(h, layer.w1);
        let f = tape.add_row(f, layer.b1);
        let f = tape.gelu(f);
        let f = tape.matmul(f, layer.w2);
        let f = tape.add_row(f, layer.b2);
        let res = tape.add(h, f);
        h = tape.layer_norm(res, layer.ln2_gain, layer.ln2_offset);
        tape.set_label(h, format!("encoder.layer{i}.output"));
    }
    Ok((tape.slice_rows(h, 0, 1), truncated))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Passage,
}

/// Encoder output at the `[CLS]` position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Representation {
    pub source_id: String,
    pub role: Role,
    pub prompt_index: Option<usize>,
    pub vector: Vec<f64>,
    pub truncated: bool,
}

/// Per-layer `(K_prompt, V_prompt)` pairs, each `p × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPrefixes {
    pub layers: Vec<(Matrix, Matrix)>,
}

impl LayerPrefixes {
    pub fn prompt_len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.0.rows())
    }
}

/// Pure forward pass; parameters are only read.
pub fn encode(params: &EncoderParams, tokens: &[u32], prefixes: Option<&LayerPrefixes>) -> Result<(Vec<f64>, bool)> {
    let mut tape = Tape::new();
    let mut slots = SlotAlloc::new();
    let vars = params.bind(&mut tape, &mut slots);
    let bound: Option<Vec<PrefixVars>> = prefixes.map(|p| {
        p.layers.iter().map(|(k, v)| (tape.constant(k.clone()), tape.constant(v.clone()))).collect()
    });
    let (out, truncated) = encode_on_tape(&mut tape, &vars, tokens, bound.as_deref())?;
    let v = tape.value(out).row(0).to_vec();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("encoder output".into()));
    }
    Ok((v, truncated))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::norm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> EncoderParams {
        let cfg = EncoderConfig { dim: 8, num_layers: 2, heads: 2, ff_dim: 16, max_len: 10, vocab_size: 20 };
        EncoderParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    /// Plain-matrix attention without any prefix, written independently of
    /// the tape.
    fn reference_attention(l: &LayerParams, x: &Matrix, heads: usize) -> Matrix {
        let bias = |m: Matrix, b: &Matrix| {
            let mut m = m;
            for r in 0..m.rows() {
                for (v, bb) in m.row_mut(r).iter_mut().zip(b.row(0)) {
                    *v += bb;
                }
            }
            m
        };
        let q = bias(x.matmul(&l.wq), &l.bq);
        let k = bias(x.matmul(&l.wk), &l.bk);
        let v = bias(x.matmul(&l.wv), &l.bv);
        let hd = x.cols() / heads;
        let mut parts = Vec::new();
        for h in 0..heads {
            let (qh, kh, vh) = (q.slice_cols(h * hd, (h + 1) * hd), k.slice_cols(h * hd, (h + 1) * hd), v.slice_cols(h * hd, (h + 1) * hd));
            let mut s = qh.matmul_bt(&kh).scale(1.0 / (hd as f64).sqrt());
            for r in 0..s.rows() {
                let row = s.row_mut(r);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|e| (e - m).exp()).sum();
                for e in row.iter_mut() {
                    *e = (*e - m).exp() / z;
                }
            }
            parts.push(s.matmul(&vh));
        }
        let refs: Vec<&Matrix> = parts.iter().collect();
        bias(Matrix::hstack(&refs).unwrap().matmul(&l.wo), &l.bo)
    }

    #[test]
    fn empty_prefix_matches_plain_attention() {
        let p = small();
        let x = Matrix::random_normal(5, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let mut tape = Tape::new();
        let mut slots = SlotAlloc::new();
        let lv = p.layers[0].bind(&mut tape, &mut slots);
        let h = tape.constant(x.clone());
        let none = attend_with_prefix(&mut tape, &lv, h, None, 2).unwrap();
        let ek = tape.constant(Matrix::zeros(0, 8));
        let ev = tape.constant(Matrix::zeros(0, 8));
        let empty = attend_with_prefix(&mut tape, &lv, h, Some((ek, ev)), 2).unwrap();
        assert_eq!(tape.value(none), tape.value(empty));
        let r = reference_attention(&p.layers[0], &x, 2);
        assert!(tape.value(none).max_abs_diff(&r) < 1e-12);
    }

    #[test]
    fn softmax_rows_cover_prefix_and_input() {
        let mut tape = Tape::new();
        let q = tape.constant(Matrix::random_normal(3, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
        let k = tape.constant(Matrix::random_normal(5, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(3)));
        let s = tape.matmul_bt(q, k);
        let w = tape.softmax_rows(s);
        for r in 0..3 {
            assert!((tape.value(w).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn hand_computed_single_token_prefix() {
        // dim 2, one head, identity projections, zero biases.
        let id = Matrix::identity(2);
        let z = Matrix::zeros(1, 2);
        let layer = LayerParams {
            wq: id.clone(), bq: z.clone(), wk: id.clone(), bk: z.clone(), wv: id.clone(), bv: z.clone(),
            wo: id.clone(), bo: z.clone(), ln1_gain: Matrix::filled(1, 2, 1.0), ln1_offset: z.clone(),
            w1: id.clone(), b1: z.clone(), w2: id, b2: z.clone(), ln2_gain: Matrix::filled(1, 2, 1.0), ln2_offset: z,
        };
        let mut tape = Tape::new();
        let mut slots = SlotAlloc::new();
        let lv = layer.bind(&mut tape, &mut slots);
        let x = tape.constant(Matrix::row_vector(&[1.0, 0.0]));
        let kp = tape.constant(Matrix::row_vector(&[0.0, 2.0]));
        let vp = tape.constant(Matrix::row_vector(&[3.0, 1.0]));
        let out = attend_with_prefix(&mut tape, &lv, x, Some((kp, vp)), 1).unwrap();
        // scores: q·kp/√2 = 0, q·x/√2 = 1/√2.
        let s = 1.0 / 2f64.sqrt();
        let wp = 1.0 / (1.0 + s.exp());
        let wx = s.exp() / (1.0 + s.exp());
        let expect = [wp * 3.0 + wx * 1.0, wp * 1.0 + wx * 0.0];
        let got = tape.value(out).row(0);
        assert!((got[0] - expect[0]).abs() < 1e-12 && (got[1] - expect[1]).abs() < 1e-12, "{got:?} vs {expect:?}");
    }

    #[test]
    fn encode_properties() {
        let p = small();
        let toks = [3u32, 4, 5, 6];
        let (a, _) = encode(&p, &toks, None).unwrap();
        let (b, _) = encode(&p, &toks, None).unwrap();
        assert_eq!(a, b);
        let empty = LayerPrefixes { layers: vec![(Matrix::zeros(0, 8), Matrix::zeros(0, 8)); 2] };
        assert_eq!(encode(&p, &toks, Some(&empty)).unwrap().0, a);
        let (perm, _) = encode(&p, &[6, 5, 4, 3], None).unwrap();
        assert_ne!(perm, a);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pa = LayerPrefixes { layers: (0..2).map(|_| (Matrix::random_normal(2, 8, 1.0, &mut rng), Matrix::random_normal(2, 8, 1.0, &mut rng))).collect() };
        let pb = LayerPrefixes { layers: (0..2).map(|_| (Matrix::random_normal(2, 8, 1.0, &mut rng), Matrix::random_normal(2, 8, 1.0, &mut rng))).collect() };
        let (ra, _) = encode(&p, &toks, Some(&pa)).unwrap();
        let (rb, _) = encode(&p, &toks, Some(&pb)).unwrap();
        let d: Vec<f64> = ra.iter().zip(&rb).map(|(x, y)| x - y).collect();
        assert!(norm(&d) > 1e-6);

        let long: Vec<u32> = (0..30).map(|i| 2 + i % 18).collect();
        let (_, truncated) = encode(&p, &long, None).unwrap();
        assert!(truncated);
        assert!(encode(&p, &[], None).is_err());
        let wrong = LayerPrefixes { layers: vec![(Matrix::zeros(1, 8), Matrix::zeros(1, 8))] };
        assert!(matches!(encode(&p, &toks, Some(&wrong)), Err(Error::Shape(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig::new(10);
        assert!(c.validate().is_ok());
        c.heads = 5;
        assert!(c.validate().is_err());
    }
}
