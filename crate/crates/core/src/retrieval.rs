//! Exact cosine retrieval, an Okapi BM25 baseline, category relevance and
//! ranking metrics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Matrix};

/// One stored passage: id, categories and raw representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassageEntry {
    pub id: String,
    pub categories: BTreeSet<String>,
    pub vector: Vec<f64>,
}

/// Unit-normalized passage rows in insertion order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseIndex {
    pub ids: Vec<String>,
    pub categories: Vec<BTreeSet<String>>,
    pub vectors: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    /// `(passage id, score)`, best first.
    pub results: Vec<(String, f64)>,
}

fn normalized(v: &[f64], what: &str) -> Result<Vec<f64>> {
    let n = norm(v);
    if !n.is_finite() {
        return Err(Error::NonFinite(what.to_string()));
    }
    if n == 0.0 {
        return Err(Error::ZeroNorm(what.to_string()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Sorts by descending score, then ascending id, and keeps `k`.
fn top_k(mut scored: Vec<(String, f64)>, k: usize) -> Vec<(String, f64)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

impl DenseIndex {
    pub fn build(passages: Vec<PassageEntry>) -> Result<Self> {
        let dim = passages.first().map_or(0, |p| p.vector.len());
        let mut seen = BTreeSet::new();
        let mut data = Vec::with_capacity(passages.len() * dim);
        let (mut ids, mut categories) = (Vec::new(), Vec::new());
        for p in passages {
            if !seen.insert(p.id.clone()) {
                return Err(Error::DuplicateId(p.id));
            }
            if p.vector.len() != dim {
                return Err(Error::Shape(format!("passage {} has {} dimensions, expected {dim}", p.id, p.vector.len())));
            }
            data.extend(normalized(&p.vector, &format!("passage {}", p.id))?);
            ids.push(p.id);
            categories.push(p.categories);
        }
        let vectors = Matrix::from_vec(ids.len(), dim, data)?;
        Ok(Self { ids, categories, vectors })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    /// Cosine scores against every row, in index order.
    pub fn scores(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.dim() {
            return Err(Error::Shape(format!("query has {} dimensions, index has {}", query.len(), self.dim())));
        }
        let q = normalized(query, "query")?;
        Ok((0..self.len()).map(|r| dot(&q, self.vectors.row(r))).collect())
    }

    pub fn search(&self, query_id: &str, query: &[f64], k: usize) -> Result<RankedList> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let scored = self.ids.iter().cloned().zip(self.scores(query)?).collect();
        Ok(RankedList { query_id: query_id.to_string(), results: top_k(scored, k) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

/// Term statistics of a tokenized passage collection.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    ids: Vec<String>,
    term_freqs: Vec<HashMap<String, usize>>,
    lengths: Vec<usize>,
    doc_freq: HashMap<String, usize>,
    avg_len: f64,
}

impl Bm25Index {
    pub fn new(passages: &[(String, Vec<String>)]) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        let mut term_freqs = Vec::with_capacity(passages.len());
        for (id, tokens) in passages {
            if !seen.insert(id) {
                return Err(Error::DuplicateId(id.clone()));
            }
            let mut tf: HashMap<String, usize> = HashMap::new();
            for t in tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for t in tf.keys() {
                *doc_freq.entry(t.clone()).or_default() += 1;
            }
            term_freqs.push(tf);
        }
        let lengths: Vec<usize> = passages.iter().map(|(_, t)| t.len()).collect();
        let avg_len = if lengths.is_empty() { 0.0 } else { lengths.iter().sum::<usize>() as f64 / lengths.len() as f64 };
        Ok(Self { ids: passages.iter().map(|(id, _)| id.clone()).collect(), term_freqs, lengths, doc_freq, avg_len })
    }

    pub fn idf(&self, term: &str) -> f64 {
        let m = self.ids.len() as f64;
        let df = self.doc_freq.get(term).copied().unwrap_or(0) as f64;
        (1.0 + (m - df + 0.5) / (df + 0.5)).ln()
    }

    /// Okapi score of every passage, in collection order.
    pub fn scores(&self, query: &[String], params: Bm25Params) -> Result<Vec<f64>> {
        if !(params.k1 > 0.0) || !(0.0..=1.0).contains(&params.b) {
            return Err(Error::InvalidArgument(format!("BM25 needs k1 > 0 and b in [0, 1], got {params:?}")));
        }
        let idfs: Vec<(&String, f64)> = query.iter().map(|t| (t, self.idf(t))).collect();
        Ok((0..self.ids.len())
            .map(|d| {
                let norm_len = if self.avg_len > 0.0 { self.lengths[d] as f64 / self.avg_len } else { 0.0 };
                idfs.iter()
                    .map(|(t, idf)| {
                        let tf = self.term_freqs[d].get(*t).copied().unwrap_or(0) as f64;
                        if tf == 0.0 {
                            0.0
                        } else {
                            idf * tf * (params.k1 + 1.0) / (tf + params.k1 * (1.0 - params.b + params.b * norm_len))
                        }
                    })
                    .sum()
            })
            .collect())
    }

    /// Top-`k` passages; an empty query gives an empty list.
    pub fn search(&self, query_id: &str, query: &[String], k: usize, params: Bm25Params) -> Result<RankedList> {
        if query.is_empty() {
            return Ok(RankedList { query_id: query_id.to_string(), results: Vec::new() });
        }
        let scored = self.ids.iter().cloned().zip(self.scores(query, params)?).collect();
        Ok(RankedList { query_id: query_id.to_string(), results: top_k(scored, k) })
    }
}

pub fn bm25_search(passages: &[(String, Vec<String>)], query: &[String], k: usize, params: Bm25Params) -> Result<RankedList> {
    Bm25Index::new(passages)?.search("query", query, k, params)
}

/// Category intersection; a query is always relevant to its own passage.
pub fn relevance(query_id: &str, query_categories: &BTreeSet<String>, passage_id: &str, passage_categories: &BTreeSet<String>) -> bool {
    query_id == passage_id || !query_categories.is_disjoint(passage_categories)
}

/// Category lookup for queries and the passage collection.
#[derive(Debug, Clone, Default)]
pub struct RelevanceJudge {
    queries: BTreeMap<String, BTreeSet<String>>,
    passages: BTreeMap<String, BTreeSet<String>>,
}

impl RelevanceJudge {
    pub fn new<'a>(
        queries: impl IntoIterator<Item = (&'a str, &'a BTreeSet<String>)>,
        passages: impl IntoIterator<Item = (&'a str, &'a BTreeSet<String>)>,
    ) -> Self {
        Self {
            queries: queries.into_iter().map(|(i, c)| (i.to_string(), c.clone())).collect(),
            passages: passages.into_iter().map(|(i, c)| (i.to_string(), c.clone())).collect(),
        }
    }

    pub fn is_relevant(&self, query_id: &str, passage_id: &str) -> Result<bool> {
        let q = self.queries.get(query_id).ok_or_else(|| Error::UnknownDocument(query_id.to_string()))?;
        let p = self.passages.get(passage_id).ok_or_else(|| Error::UnknownDocument(passage_id.to_string()))?;
        Ok(relevance(query_id, q, passage_id, p))
    }

    /// Relevant passages for `query_id` in the collection, optionally
    /// ignoring its own passage.
    pub fn relevant_total(&self, query_id: &str, filter_self: bool) -> Result<usize> {
        let q = self.queries.get(query_id).ok_or_else(|| Error::UnknownDocument(query_id.to_string()))?;
        Ok(self
            .passages
            .iter()
            .filter(|(pid, pc)| !(filter_self && pid.as_str() == query_id) && relevance(query_id, q, pid, pc))
            .count())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryDetail {
    pub query_id: String,
    /// 1-based rank of the first relevant passage in the list.
    pub first_relevant: Option<usize>,
    pub relevant_total: usize,
    /// Average precision per cutoff, absent when the query has no relevant
    /// passage.
    pub average_precision: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub note: String,
    pub queries: usize,
    /// Queries with no relevant passage; counted as misses in acc and mrr,
    /// left out of map.
    pub without_relevant: usize,
    pub acc: BTreeMap<usize, f64>,
    pub mrr: BTreeMap<usize, f64>,
    pub map: BTreeMap<usize, f64>,
    pub details: Vec<QueryDetail>,
}

pub const MAP_NOTE: &str = "map@k divides by min(R, k), R = relevant passages in the collection";

/// Acc@k, MRR@k and MAP@k. With `filter_self`, a query's own passage is
/// dropped from its list and from its relevant count.
pub fn compute_metrics(lists: &[RankedList], judge: &RelevanceJudge, ks: &[usize], filter_self: bool) -> Result<MetricsReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidArgument("metric cutoffs must be non-empty and positive".into()));
    }
    let mut details = Vec::with_capacity(lists.len());
    let mut acc: BTreeMap<usize, f64> = ks.iter().map(|&k| (k, 0.0)).collect();
    let mut mrr = acc.clone();
    let mut map = acc.clone();
    let mut without_relevant = 0;
    for list in lists {
        let ranked: Vec<&str> =
            list.results.iter().map(|(p, _)| p.as_str()).filter(|p| !(filter_self && *p == list.query_id)).collect();
        let flags = ranked.iter().map(|p| judge.is_relevant(&list.query_id, p)).collect::<Result<Vec<bool>>>()?;
        let total = judge.relevant_total(&list.query_id, filter_self)?;
        let first = flags.iter().position(|&f| f).map(|i| i + 1);
        let mut ap = BTreeMap::new();
        if total == 0 {
            without_relevant += 1;
        }
        for &k in ks {
            if let Some(r) = first.filter(|&r| r <= k) {
                *acc.get_mut(&k).expect("cutoff") += 1.0;
                *mrr.get_mut(&k).expect("cutoff") += 1.0 / r as f64;
            }
            if total > 0 {
                let (mut hits, mut sum) = (0usize, 0.0);
                for (i, &f) in flags.iter().take(k).enumerate() {
                    if f {
                        hits += 1;
                        sum += hits as f64 / (i + 1) as f64;
                    }
                }
                let v = sum / total.min(k) as f64;
                *map.get_mut(&k).expect("cutoff") += v;
                ap.insert(k, v);
            }
        }
        details.push(QueryDetail { query_id: list.query_id.clone(), first_relevant: first, relevant_total: total, average_precision: ap });
    }
    let n = lists.len();
    let scored = n - without_relevant;
    for v in acc.values_mut().chain(mrr.values_mut()) {
        *v = if n > 0 { *v / n as f64 } else { 0.0 };
    }
    for v in map.values_mut() {
        *v = if scored > 0 { *v / scored as f64 } else { 0.0 };
    }
    Ok(MetricsReport { note: MAP_NOTE.to_string(), queries: n, without_relevant, acc, mrr, map, details })
}

/// Writes `query_id, rank, passage_id, score` rows.
pub fn write_ranked_tsv(path: impl AsRef<Path>, lists: &[RankedList]) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let mut body = || -> std::io::Result<()> {
        writeln!(w, "query_id\trank\tpassage_id\tscore")?;
        for l in lists {
            for (i, (p, s)) in l.results.iter().enumerate() {
                writeln!(w, "{}\t{}\t{}\t{:e}", l.query_id, i + 1, p, s)?;
            }
        }
        w.flush()
    };
    body().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cats(c: &[&str]) -> BTreeSet<String> {
        c.iter().map(|s| s.to_string()).collect()
    }

    fn entry(id: &str, v: &[f64]) -> PassageEntry {
        PassageEntry { id: id.into(), categories: cats(&["a"]), vector: v.to_vec() }
    }

    #[test]
    fn index_basics() {
        let idx = DenseIndex::build(vec![entry("a", &[3.0, 4.0]), entry("b", &[0.0, 2.0]), entry("c", &[1.0, 0.0])]).unwrap();
        assert_eq!(idx.len(), 3);
        for r in 0..3 {
            assert!((dot(idx.vectors.row(r), idx.vectors.row(r)) - 1.0).abs() < 1e-9);
        }
        let hit = idx.search("q", &[6.0, 8.0], 1).unwrap();
        assert_eq!(hit.results[0].0, "a");
        assert!((hit.results[0].1 - 1.0).abs() < 1e-12);
        assert!(matches!(DenseIndex::build(vec![entry("a", &[1.0]), entry("a", &[2.0])]), Err(Error::DuplicateId(_))));
        assert!(matches!(DenseIndex::build(vec![entry("z", &[0.0, 0.0])]), Err(Error::ZeroNorm(m)) if m.contains('z')));
        assert!(idx.search("q", &[0.0, 0.0], 1).is_err());
    }

    #[test]
    fn orthogonal_query_orders_by_id() {
        let idx = DenseIndex::build(vec![entry("c", &[1.0, 0.0]), entry("a", &[1.0, 0.0]), entry("b", &[1.0, 0.0])]).unwrap();
        let r = idx.search("q", &[0.0, 1.0], 10).unwrap();
        let ids: Vec<&str> = r.results.iter().map(|(i, _)| i.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert!(r.results.iter().all(|(_, s)| *s == 0.0));
    }

    #[test]
    fn bm25_simple_cases() {
        let toks = |s: &str| s.split(' ').map(String::from).collect::<Vec<_>>();
        let docs = vec![("1".to_string(), toks("graph node")), ("2".to_string(), toks("tree leaf"))];
        let r = bm25_search(&docs, &toks("graph"), 2, Bm25Params::default()).unwrap();
        assert_eq!(r.results[0].0, "1");
        assert_eq!(r.results[1].1, 0.0);
        let r = bm25_search(&docs, &toks("absent"), 2, Bm25Params::default()).unwrap();
        assert!(r.results.iter().all(|(_, s)| *s == 0.0));
        assert!(bm25_search(&docs, &[], 2, Bm25Params::default()).unwrap().results.is_empty());
    }

    #[test]
    fn metric_hand_values() {
        let q = cats(&["x"]);
        let docs: Vec<(String, BTreeSet<String>)> = vec![
            ("q".into(), q.clone()),
            ("p1".into(), cats(&["y"])),
            ("p2".into(), cats(&["y"])),
            ("p3".into(), cats(&["x"])),
        ];
        let judge = RelevanceJudge::new([("q", &q)], docs.iter().map(|(i, c)| (i.as_str(), c)));
        let list = RankedList {
            query_id: "q".into(),
            results: ["p1", "p2", "p3", "q"].iter().map(|s| (s.to_string(), 0.0)).collect(),
        };
        let rep = compute_metrics(&[list.clone()], &judge, &[1, 10], false).unwrap();
        assert!((rep.mrr[&10] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(rep.acc[&1], 0.0);
        // relevant at ranks 3 and 4, R = 2.
        assert!((rep.map[&10] - (1.0 / 3.0 + 2.0 / 4.0) / 2.0).abs() < 1e-15);
        let rep = compute_metrics(&[list], &judge, &[10], true).unwrap();
        assert_eq!(rep.details[0].relevant_total, 1);
        assert!((rep.map[&10] - 1.0 / 3.0).abs() < 1e-15);
    }
}
