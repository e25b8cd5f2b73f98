//! Category correlation, in-batch mining and the contrastive training losses.
//!
//! Every loss has a plain implementation over `f64` slices, used as a
//! reference and for reporting, and a tape implementation used for training.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AnchorTerms, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::cosine;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub margin: f64,
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { temperature: 0.05, margin: 0.2, alpha: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::InvalidArgument(format!("margin must be non-negative, got {}", self.margin)));
        }
        if !(0.0..0.5).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!("alpha must lie in [0, 0.5), got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Jaccard overlap of two category sets.
pub fn correlation(a: &BTreeSet<String>, b: &BTreeSet<String>) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("correlation needs non-empty category sets".into()));
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    Ok(inter as f64 / union as f64)
}

/// Positives and negatives of one anchor query.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnchorMining {
    /// `(batch index, ρ)`; never contains the anchor itself.
    pub positive_queries: Vec<(usize, f64)>,
    pub negative_queries: Vec<usize>,
    /// `(batch index, ρ)`; the anchor's own passage comes first with ρ = 1.
    pub positive_passages: Vec<(usize, f64)>,
    pub negative_passages: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinedBatch {
    pub ids: Vec<String>,
    pub anchors: Vec<AnchorMining>,
    /// Anchors without a positive query, left out of the query-query average.
    pub no_positive_queries: usize,
    /// Anchors without a positive passage, left out of the query-passage average.
    pub no_positive_passages: usize,
}

impl MinedBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn qq_terms(&self) -> Vec<AnchorTerms> {
        self.anchors
            .iter()
            .enumerate()
            .map(|(i, a)| AnchorTerms { row: i, positives: a.positive_queries.clone(), negatives: a.negative_queries.clone() })
            .collect()
    }

    fn qp_terms(&self) -> Vec<AnchorTerms> {
        self.anchors
            .iter()
            .enumerate()
            .map(|(i, a)| AnchorTerms { row: i, positives: a.positive_passages.clone(), negatives: a.negative_passages.clone() })
            .collect()
    }
}

/// Items sharing a category with the anchor are positives weighted by their
/// correlation; the rest are negatives.
pub fn mine_in_batch(items: &[(&str, &BTreeSet<String>)]) -> Result<MinedBatch> {
    if items.len() < 2 {
        return Err(Error::InvalidArgument(format!("in-batch mining needs at least 2 items, got {}", items.len())));
    }
    let mut anchors = Vec::with_capacity(items.len());
    for (i, (_, ci)) in items.iter().enumerate() {
        let mut a = AnchorMining { positive_passages: vec![(i, 1.0)], ..Default::default() };
        for (j, (_, cj)) in items.iter().enumerate() {
            if i == j {
                continue;
            }
            let rho = correlation(ci, cj)?;
            if rho > 0.0 {
                a.positive_queries.push((j, rho));
                a.positive_passages.push((j, rho));
            } else {
                a.negative_queries.push(j);
                a.negative_passages.push(j);
            }
        }
        anchors.push(a);
    }
    let no_positive_queries = anchors.iter().filter(|a| a.positive_queries.is_empty()).count();
    let no_positive_passages = anchors.iter().filter(|a| a.positive_passages.is_empty()).count();
    Ok(MinedBatch { ids: items.iter().map(|(id, _)| id.to_string()).collect(), anchors, no_positive_queries, no_positive_passages })
}

fn sim(a: &[f64], b: &[f64]) -> Result<f64> {
    cosine(a, b).ok_or_else(|| Error::ZeroNorm("representation with zero norm in a cosine similarity".into()))
}

/// `−(1/m) Σ_z ρ_z · log softmax` of each positive against the negatives.
/// Shared by the query-query and query-passage losses.
pub fn weighted_nll(anchor: &[f64], positives: &[(&[f64], f64)], negatives: &[&[f64]], temperature: f64) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::InvalidArgument("the loss needs at least one positive".into()));
    }
    let neg: Vec<f64> = negatives.iter().map(|n| sim(anchor, n).map(|s| s / temperature)).collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut logits = Vec::with_capacity(neg.len() + 1);
    for (p, rho) in positives {
        logits.clear();
        logits.push(sim(anchor, p)? / temperature);
        logits.extend_from_slice(&neg);
        total += rho * neg_log_softmax_first(&logits);
    }
    Ok(total / positives.len() as f64)
}

/// `lse(x) − x₀`, accurate when `x₀` dominates.
fn neg_log_softmax_first(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let rest: f64 = x.iter().enumerate().map(|(i, &v)| if i == 0 && v == m { 0.0 } else { (v - m).exp() }).sum();
    if x[0] == m {
        rest.ln_1p()
    } else {
        (m - x[0]) + rest.ln()
    }
}

pub fn loss_query_query(anchor: &[f64], positives: &[(&[f64], f64)], negatives: &[&[f64]], temperature: f64) -> Result<f64> {
    weighted_nll(anchor, positives, negatives, temperature)
}

pub fn loss_query_passage(anchor: &[f64], positives: &[(&[f64], f64)], negatives: &[&[f64]], temperature: f64) -> Result<f64> {
    weighted_nll(anchor, positives, negatives, temperature)
}

/// Margin loss pushing abstracts under prompt `k` away from the same
/// abstracts under every other prompt. `reps[z][i]` is abstract `i` encoded
/// under prompt `z`.
pub fn loss_topic(k: usize, reps: &[Vec<Vec<f64>>], margin: f64) -> Result<f64> {
    let ks = reps.len();
    if ks < 2 {
        return Err(Error::InvalidArgument(format!("the topic loss needs at least 2 prompts, got {ks}")));
    }
    let n = reps[0].len();
    if n == 0 || reps.iter().any(|r| r.len() != n) || k >= ks {
        return Err(Error::Shape(format!("topic loss needs {ks} equally sized non-empty groups and k < {ks}")));
    }
    let mut total = 0.0;
    for z in (0..ks).filter(|&z| z != k) {
        for i in 0..n {
            for j in 0..n {
                let same = sim(&reps[k][i], &reps[k][j])?;
                let cross = sim(&reps[k][i], &reps[z][j])?;
                total += (margin - same + cross).max(0.0);
            }
        }
    }
    Ok(total / ((ks - 1) * n * n) as f64)
}

/// The combined loss and its three parts, each already averaged but not yet
/// weighted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub query_passage: f64,
    pub query_query: f64,
    /// Mean of the per-prompt topic losses; zero without prompts.
    pub topic: f64,
    pub active_query_passage: usize,
    pub active_query_query: usize,
}

/// `(1−2α)·qp + α·qq + α·topic`, where qp and qq average over anchors that
/// have positives and topic averages over prompts.
pub fn combine_terms(qp: f64, qq: f64, topic: Option<f64>, alpha: f64) -> f64 {
    (1.0 - 2.0 * alpha) * qp + alpha * qq + alpha * topic.unwrap_or(0.0)
}

/// Plain evaluation of the combined loss.
pub fn loss_total(
    mined: &MinedBatch,
    queries: &[Vec<f64>],
    passages: &[Vec<f64>],
    topic_reps: Option<&[Vec<Vec<f64>>]>,
    config: &LossConfig,
) -> Result<LossBreakdown> {
    config.validate()?;
    let n = mined.len();
    if queries.len() != n || passages.len() != n {
        return Err(Error::Shape(format!("{n} mined items but {} queries and {} passages", queries.len(), passages.len())));
    }
    let (mut qp, mut qq, mut nqp, mut nqq) = (0.0, 0.0, 0, 0);
    for (i, a) in mined.anchors.iter().enumerate() {
        if !a.positive_passages.is_empty() {
            let pos: Vec<(&[f64], f64)> = a.positive_passages.iter().map(|&(j, r)| (passages[j].as_slice(), r)).collect();
            let neg: Vec<&[f64]> = a.negative_passages.iter().map(|&j| passages[j].as_slice()).collect();
            qp += loss_query_passage(&queries[i], &pos, &neg, config.temperature)?;
            nqp += 1;
        }
        if !a.positive_queries.is_empty() {
            let pos: Vec<(&[f64], f64)> = a.positive_queries.iter().map(|&(j, r)| (queries[j].as_slice(), r)).collect();
            let neg: Vec<&[f64]> = a.negative_queries.iter().map(|&j| queries[j].as_slice()).collect();
            qq += loss_query_query(&queries[i], &pos, &neg, config.temperature)?;
            nqq += 1;
        }
    }
    let qp = if nqp > 0 { qp / nqp as f64 } else { 0.0 };
    let qq = if nqq > 0 { qq / nqq as f64 } else { 0.0 };
    let topic = match topic_reps {
        Some(reps) => {
            let ks = reps.len();
            let mut t = 0.0;
            for k in 0..ks {
                t += loss_topic(k, reps, config.margin)?;
            }
            Some(t / ks as f64)
        }
        None => None,
    };
    Ok(LossBreakdown {
        total: combine_terms(qp, qq, topic, config.alpha),
        query_passage: qp,
        query_query: qq,
        topic: topic.unwrap_or(0.0),
        active_query_passage: nqp,
        active_query_query: nqq,
    })
}

/// Tape nodes of the combined loss and its parts.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub query_passage: Var,
    pub query_query: Var,
    pub topic: Option<Var>,
    pub active_query_passage: usize,
    pub active_query_query: usize,
}

/// Tape version of [`loss_total`]. `queries` and `passages` are `N × dim`
/// stacks; `topic_reps` holds one `N' × dim` stack per prompt.
pub fn loss_total_on_tape(
    tape: &mut Tape,
    mined: &MinedBatch,
    queries: Var,
    passages: Var,
    topic_reps: Option<&[Var]>,
    config: &LossConfig,
) -> Result<LossVars> {
    config.validate()?;
    let q = tape.normalize_rows(queries)?;
    let p = tape.normalize_rows(passages)?;
    let nqp = mined.len() - mined.no_positive_passages;
    let nqq = mined.len() - mined.no_positive_queries;

    let s_qp = tape.matmul_bt(q, p);
    let qp_sum = tape.contrastive_nll(s_qp, mined.qp_terms(), config.temperature);
    let qp = tape.scale(qp_sum, if nqp > 0 { 1.0 / nqp as f64 } else { 0.0 });
    tape.set_label(qp, "loss_query_passage");

    let s_qq = tape.matmul_bt(q, q);
    let qq_sum = tape.contrastive_nll(s_qq, mined.qq_terms(), config.temperature);
    let qq = tape.scale(qq_sum, if nqq > 0 { 1.0 / nqq as f64 } else { 0.0 });
    tape.set_label(qq, "loss_query_query");

    let topic = match topic_reps {
        Some(reps) => Some(topic_on_tape(tape, reps, config.margin)?),
        None => None,
    };
    let mut terms = vec![(qp, 1.0 - 2.0 * config.alpha), (qq, config.alpha)];
    if let Some(t) = topic {
        terms.push((t, config.alpha));
    }
    let total = tape.combine(&terms);
    tape.set_label(total, "loss_total");
    Ok(LossVars { total, query_passage: qp, query_query: qq, topic, active_query_passage: nqp, active_query_query: nqq })
}

/// Mean over prompts of the per-prompt topic loss.
fn topic_on_tape(tape: &mut Tape, reps: &[Var], margin: f64) -> Result<Var> {
    let ks = reps.len();
    if ks < 2 {
        return Err(Error::InvalidArgument(format!("the topic loss needs at least 2 prompts, got {ks}")));
    }
    let n = tape.value(reps[0]).rows();
    let normed = reps.iter().map(|&r| tape.normalize_rows(r)).collect::<Result<Vec<_>>>()?;
    let mut parts = Vec::new();
    for k in 0..ks {
        let same = tape.matmul_bt(normed[k], normed[k]);
        for z in (0..ks).filter(|&z| z != k) {
            let cross = tape.matmul_bt(normed[k], normed[z]);
            parts.push((tape.hinge_sum(same, cross, margin), 1.0));
        }
    }
    let sum = tape.combine(&parts);
    let t = tape.scale(sum, 1.0 / (ks * (ks - 1) * n * n) as f64);
    tape.set_label(t, "loss_topic");
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cats(names: &[&str]) -> BTreeSet<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn jaccard_cases() {
        assert!((correlation(&cats(&["a", "b"]), &cats(&["b", "c"])).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(correlation(&cats(&["a"]), &cats(&["a"])).unwrap(), 1.0);
        assert_eq!(correlation(&cats(&["a"]), &cats(&["b"])).unwrap(), 0.0);
        assert!(correlation(&cats(&[]), &cats(&["b"])).is_err());
    }

    #[test]
    fn mining_two_items() {
        let (a, b) = (cats(&["x"]), cats(&["y"]));
        let m = mine_in_batch(&[("1", &a), ("2", &b)]).unwrap();
        assert_eq!(m.anchors[0].positive_passages, vec![(0, 1.0)]);
        assert_eq!(m.anchors[0].negative_passages, vec![1]);
        assert_eq!(m.anchors[0].negative_queries, vec![1]);
        assert_eq!(m.no_positive_queries, 2);
        let m = mine_in_batch(&[("1", &a), ("2", &a)]).unwrap();
        assert_eq!(m.anchors[1].positive_queries, vec![(0, 1.0)]);
        assert_eq!(m.anchors[1].positive_passages, vec![(1, 1.0), (0, 1.0)]);
        assert!(mine_in_batch(&[("1", &a)]).is_err());
    }

    #[test]
    fn hand_values() {
        let (x, y) = ([1.0, 0.0], [0.0, 1.0]);
        let l = loss_query_query(&x, &[(&x, 1.0)], &[&y], 0.05).unwrap();
        assert!((l / (-20f64).exp().ln_1p() - 1.0).abs() < 1e-12);
        assert_eq!(loss_query_passage(&x, &[(&x, 0.7)], &[], 1.0).unwrap(), 0.0);
        assert!(matches!(loss_query_query(&[0.0, 0.0], &[(&x, 1.0)], &[], 1.0), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn tape_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sets = [cats(&["a"]), cats(&["a", "b"]), cats(&["c"]), cats(&["b"])];
        let items: Vec<(&str, &BTreeSet<String>)> = ["d0", "d1", "d2", "d3"].iter().copied().zip(sets.iter()).collect();
        let mined = mine_in_batch(&items).unwrap();
        let q = Matrix::random_normal(4, 5, 1.0, &mut rng);
        let p = Matrix::random_normal(4, 5, 1.0, &mut rng);
        let t: Vec<Matrix> = (0..3).map(|_| Matrix::random_normal(4, 5, 1.0, &mut rng)).collect();
        let rows = |m: &Matrix| (0..m.rows()).map(|r| m.row(r).to_vec()).collect::<Vec<_>>();
        let cfg = LossConfig { temperature: 0.5, margin: 0.3, alpha: 0.2 };
        let trep: Vec<Vec<Vec<f64>>> = t.iter().map(rows).collect();
        let plain = loss_total(&mined, &rows(&q), &rows(&p), Some(&trep), &cfg).unwrap();
        let mut tape = Tape::new();
        let (qv, pv) = (tape.constant(q), tape.constant(p));
        let tv: Vec<Var> = t.into_iter().map(|m| tape.constant(m)).collect();
        let lv = loss_total_on_tape(&mut tape, &mined, qv, pv, Some(&tv), &cfg).unwrap();
        assert!((tape.scalar(lv.total) - plain.total).abs() < 1e-12);
        assert!((tape.scalar(lv.topic.unwrap()) - plain.topic).abs() < 1e-12);
        assert!((tape.scalar(lv.query_query) - plain.query_query).abs() < 1e-12);
    }
}
