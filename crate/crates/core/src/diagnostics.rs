//! Embedding-space diagnostics: alignment, uniformity, the mean similarity
//! of relevant and irrelevant pairs, and TSV export for external projection.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, norm};

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !n.is_finite() {
        return Err(Error::NonFinite("representation".into()));
    }
    if n == 0.0 {
        return Err(Error::ZeroNorm("representation with zero norm".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean squared distance between normalized pair members.
pub fn alignment(pairs: &[(&[f64], &[f64])]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("alignment needs at least one pair".into()));
    }
    let mut total = 0.0;
    for (a, b) in pairs {
        total += sq_dist(&unit(a)?, &unit(b)?);
    }
    Ok(total / pairs.len() as f64)
}

/// `ln mean exp(−2‖f(x) − f(y)‖²)` over distinct unordered pairs.
pub fn uniformity(reps: &[&[f64]]) -> Result<f64> {
    if reps.len() < 2 {
        return Err(Error::InvalidArgument(format!("uniformity needs at least 2 representations, got {}", reps.len())));
    }
    let units = reps.iter().map(|r| unit(r)).collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..units.len() {
        for j in i + 1..units.len() {
            total += (-2.0 * sq_dist(&units[i], &units[j])).exp();
            count += 1;
        }
    }
    Ok((total / count as f64).ln())
}

/// Mean cosine over relevant pairs and over a seeded uniform sample of
/// irrelevant pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityGap {
    pub positive: f64,
    pub negative: f64,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
}

impl SimilarityGap {
    pub fn gap(&self) -> f64 {
        self.positive - self.negative
    }
}

/// `relevant(i, j)` says whether query `i` and passage `j` are relevant.
/// Positives are every relevant `(i, j)`; negatives are `samples` draws with
/// replacement from the irrelevant pairs.
pub fn similarity_gap(
    queries: &[&[f64]],
    passages: &[&[f64]],
    relevant: impl Fn(usize, usize) -> bool,
    samples: usize,
    seed: u64,
) -> Result<SimilarityGap> {
    let qs = queries.iter().map(|r| unit(r)).collect::<Result<Vec<_>>>()?;
    let ps = passages.iter().map(|r| unit(r)).collect::<Result<Vec<_>>>()?;
    let (mut pos, mut n_pos) = (0.0, 0usize);
    let mut negatives = Vec::new();
    for (i, q) in qs.iter().enumerate() {
        for (j, p) in ps.iter().enumerate() {
            if relevant(i, j) {
                pos += dot(q, p);
                n_pos += 1;
            } else {
                negatives.push((i, j));
            }
        }
    }
    if n_pos == 0 || negatives.is_empty() || samples == 0 {
        return Err(Error::InvalidArgument("similarity gap needs relevant pairs, irrelevant pairs and a positive sample size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let neg: f64 = (0..samples)
        .map(|_| {
            let (i, j) = negatives[rng.random_range(0..negatives.len())];
            dot(&qs[i], &ps[j])
        })
        .sum();
    Ok(SimilarityGap { positive: pos / n_pos as f64, negative: neg / samples as f64, positive_pairs: n_pos, negative_pairs: samples })
}

pub const DEFAULT_NEGATIVE_SAMPLES: usize = 5000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    /// Similarities are raw cosines in [-1, 1], not percentages.
    pub convention: String,
    pub alignment: f64,
    pub uniformity_queries: f64,
    pub uniformity_passages: f64,
    pub similarity: SimilarityGap,
    pub queries: usize,
    pub passages: usize,
}

/// Full report for aligned query and passage lists where `queries[i]` and
/// `passages[i]` come from the same document.
pub fn diagnose(
    queries: &[&[f64]],
    passages: &[&[f64]],
    relevant: impl Fn(usize, usize) -> bool,
    samples: usize,
    seed: u64,
) -> Result<DiagnosticsReport> {
    if queries.len() != passages.len() {
        return Err(Error::Shape(format!("{} queries but {} passages", queries.len(), passages.len())));
    }
    let pairs: Vec<(&[f64], &[f64])> = queries.iter().copied().zip(passages.iter().copied()).collect();
    Ok(DiagnosticsReport {
        convention: "raw cosine".into(),
        alignment: alignment(&pairs)?,
        uniformity_queries: uniformity(queries)?,
        uniformity_passages: uniformity(passages)?,
        similarity: similarity_gap(queries, passages, relevant, samples, seed)?,
        queries: queries.len(),
        passages: passages.len(),
    })
}

/// Writes `id, label, x0..x{dim-1}` rows with a header line.
pub fn export_embeddings(path: impl AsRef<Path>, ids: &[String], labels: &[String], reps: &[Vec<f64>]) -> Result<()> {
    let path = path.as_ref();
    if ids.len() != labels.len() || ids.len() != reps.len() {
        return Err(Error::Shape(format!("{} ids, {} labels, {} representations", ids.len(), labels.len(), reps.len())));
    }
    let dim = reps.first().map_or(0, Vec::len);
    if reps.iter().any(|r| r.len() != dim) {
        return Err(Error::Shape("representations differ in length".into()));
    }
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let mut body = || -> std::io::Result<()> {
        let header: Vec<String> = ["id".to_string(), "label".to_string()].into_iter().chain((0..dim).map(|d| format!("x{d}"))).collect();
        writeln!(w, "{}", header.join("\t"))?;
        for ((id, label), r) in ids.iter().zip(labels).zip(reps) {
            let vals: Vec<String> = r.iter().map(|x| format!("{x:?}")).collect();
            if vals.is_empty() {
                writeln!(w, "{id}\t{label}")?;
            } else {
                writeln!(w, "{id}\t{label}\t{}", vals.join("\t"))?;
            }
        }
        w.flush()
    };
    body().map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`export_embeddings`].
pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Vec<(String, String, Vec<f64>)>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if n == 0 {
            continue;
        }
        let mut cols = line.split('\t');
        let parse_err = |m: String| Error::Parse { line: n + 1, message: m };
        let id = cols.next().ok_or_else(|| parse_err("missing id".into()))?.to_string();
        let label = cols.next().ok_or_else(|| parse_err("missing label".into()))?.to_string();
        let vals = cols.map(|c| c.parse::<f64>().map_err(|e| parse_err(e.to_string()))).collect::<Result<Vec<_>>>()?;
        out.push((id, label, vals));
    }
    Ok(out)
}
