//! Python bindings. Documents cross the boundary as dicts with `id`,
//! `title`, `abstract` and `categories` keys, the same shape as a corpus line.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyRuntimeError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use topic_dpr::cli::{topic_report, LoadedRun};
use topic_dpr::corpus::{self, Document, DocumentRecord, SyntheticConfig, Vocabulary};
use topic_dpr::retrieval::{self, Bm25Params, PassageEntry, RankedList, RelevanceJudge};
use topic_dpr::topic_model::{self, HldaConfig, HldaState};
use topic_dpr::trainer::{encode_texts, evaluate_dev, EvalText};

create_exception!(topicdpr, TopicDprError, PyRuntimeError);

fn err(e: topic_dpr::Error) -> PyErr {
    TopicDprError::new_err(e.to_string())
}

fn record_to_dict<'py>(py: Python<'py>, d: &Document) -> PyResult<Bound<'py, PyDict>> {
    let r = DocumentRecord::from(d);
    let out = PyDict::new(py);
    out.set_item("id", r.id)?;
    out.set_item("title", r.title)?;
    out.set_item("abstract", r.abstract_text)?;
    out.set_item("categories", r.categories)?;
    Ok(out)
}

fn field<'py, T: for<'a> FromPyObject<'a, 'py>>(d: &Bound<'py, PyDict>, key: &str) -> PyResult<T>
where
    for<'a> <T as FromPyObject<'a, 'py>>::Error: Into<PyErr>,
{
    let v = d.get_item(key)?.ok_or_else(|| TopicDprError::new_err(format!("document is missing `{key}`")))?;
    v.extract::<T>().map_err(Into::into)
}

fn documents(docs: Vec<Bound<'_, PyDict>>) -> PyResult<Vec<Document>> {
    docs.iter()
        .map(|d| {
            Ok(Document::from(DocumentRecord {
                id: field(d, "id")?,
                title: field(d, "title")?,
                abstract_text: field(d, "abstract")?,
                categories: field(d, "categories")?,
            }))
        })
        .collect()
}

fn ranked(list: RankedList) -> Vec<(String, f64)> {
    list.results
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    corpus::tokenize(text)
}

#[pyfunction]
#[pyo3(signature = (num_topics=4, docs_per_topic=40, seed=0, overlap=None, paraphrase_noise=0.0))]
fn synthetic_corpus<'py>(
    py: Python<'py>,
    num_topics: usize,
    docs_per_topic: usize,
    seed: u64,
    overlap: Option<f64>,
    paraphrase_noise: f64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let d = SyntheticConfig::default();
    let cfg = SyntheticConfig { num_topics, docs_per_topic, seed, overlap: overlap.unwrap_or(d.overlap), paraphrase_noise, ..d };
    let docs = corpus::generate_synthetic_corpus(&cfg).map_err(err)?;
    docs.iter().map(|doc| record_to_dict(py, doc)).collect()
}

#[pyfunction]
fn load_corpus(py: Python<'_>, path: PathBuf) -> PyResult<Vec<Bound<'_, PyDict>>> {
    let docs = corpus::load_corpus(path).map_err(err)?;
    docs.iter().map(|doc| record_to_dict(py, doc)).collect()
}

/// Acc@k, MRR@k and MAP@k of ranked id lists, with relevance by shared
/// category or identical id.
#[pyfunction]
#[pyo3(signature = (rankings, categories, ks=vec![1, 10, 50], filter_self=false))]
fn compute_metrics<'py>(
    py: Python<'py>,
    rankings: BTreeMap<String, Vec<String>>,
    categories: BTreeMap<String, Vec<String>>,
    ks: Vec<usize>,
    filter_self: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let lists: Vec<RankedList> = rankings
        .into_iter()
        .map(|(q, ids)| {
            let n = ids.len();
            RankedList { query_id: q, results: ids.into_iter().enumerate().map(|(i, p)| (p, (n - i) as f64)).collect() }
        })
        .collect();
    let categories: BTreeMap<String, BTreeSet<String>> = categories.into_iter().map(|(k, v)| (k, v.into_iter().collect())).collect();
    let cats = || categories.iter().map(|(k, v)| (k.as_str(), v));
    let judge = RelevanceJudge::new(cats(), cats());
    let report = retrieval::compute_metrics(&lists, &judge, &ks, filter_self).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("acc", report.acc)?;
    out.set_item("mrr", report.mrr)?;
    out.set_item("map", report.map)?;
    out.set_item("queries", report.queries)?;
    Ok(out)
}

/// Runs the command-line tool in-process and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    topic_dpr::cli::run(std::iter::once("topic-dpr".to_string()).chain(args))
}

/// A fitted topic hierarchy together with its vocabulary.
#[pyclass(module = "topicdpr")]
struct TopicModel {
    vocab: Vocabulary,
    state: HldaState,
}

#[pymethods]
impl TopicModel {
    #[staticmethod]
    #[pyo3(signature = (docs, depth=3, iterations=500, seed=0, min_count=1))]
    fn fit(docs: Vec<Bound<'_, PyDict>>, depth: usize, iterations: usize, seed: u64, min_count: u64) -> PyResult<Self> {
        let docs: Vec<Document> = documents(docs)?.into_iter().filter(Document::is_eligible).collect();
        let vocab = Vocabulary::build(&docs, min_count).map_err(err)?;
        let state = topic_model::fit_hlda(&docs, &vocab, HldaConfig { depth, iterations, seed, ..HldaConfig::default() }).map_err(err)?;
        Ok(Self { vocab, state })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (vocab, state) = topic_model::load_checkpoint(path).map_err(err)?;
        Ok(Self { vocab, state })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        topic_model::save_checkpoint(path, &self.vocab, &self.state).map_err(err)
    }

    #[getter]
    fn num_topics(&self) -> usize {
        self.state.num_topics()
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.state.iteration()
    }

    /// Topic id to probability for a document the model was fitted on.
    fn doc_topic_distribution(&self, doc_id: &str) -> PyResult<BTreeMap<usize, f64>> {
        let d = self.state.doc_topic_distribution(doc_id).map_err(err)?;
        Ok(d.topic_ids.into_iter().zip(d.components).collect())
    }

    fn prompt_topics(&self, level: usize) -> PyResult<Vec<usize>> {
        self.state.select_prompt_topics(level).map_err(err)
    }

    #[pyo3(signature = (topic, count=8))]
    fn top_words(&self, topic: usize, count: usize) -> PyResult<Vec<(String, f64)>> {
        let set = self.state.top_words(topic, count).map_err(err)?;
        Ok(set.words.iter().map(|&w| self.vocab.token(w).unwrap_or("?").to_string()).zip(set.probabilities).collect())
    }

    #[pyo3(signature = (level=1, top=8))]
    fn report(&self, level: usize, top: usize) -> PyResult<String> {
        topic_report(&self.state, &self.vocab, level, top).map_err(err)
    }
}

#[pyclass(module = "topicdpr")]
struct Bm25 {
    index: retrieval::Bm25Index,
}

#[pymethods]
impl Bm25 {
    /// `passages` is a list of `(id, text)` pairs; text is tokenized here.
    #[new]
    fn new(passages: Vec<(String, String)>) -> PyResult<Self> {
        let tokenized: Vec<(String, Vec<String>)> = passages.into_iter().map(|(id, t)| (id, corpus::tokenize(&t))).collect();
        Ok(Self { index: retrieval::Bm25Index::new(&tokenized).map_err(err)? })
    }

    #[pyo3(signature = (query, k=10, k1=1.2, b=0.75))]
    fn search(&self, query: &str, k: usize, k1: f64, b: f64) -> PyResult<Vec<(String, f64)>> {
        self.index.search("query", &corpus::tokenize(query), k, Bm25Params { k1, b }).map(ranked).map_err(err)
    }
}

/// Exact cosine search over stored vectors.
#[pyclass(module = "topicdpr")]
struct DenseIndex {
    index: retrieval::DenseIndex,
}

#[pymethods]
impl DenseIndex {
    #[new]
    fn new(ids: Vec<String>, vectors: Vec<Vec<f64>>) -> PyResult<Self> {
        if ids.len() != vectors.len() {
            return Err(TopicDprError::new_err(format!("{} ids but {} vectors", ids.len(), vectors.len())));
        }
        let entries = ids.into_iter().zip(vectors).map(|(id, vector)| PassageEntry { id, categories: BTreeSet::new(), vector }).collect();
        Ok(Self { index: retrieval::DenseIndex::build(entries).map_err(err)? })
    }

    fn __len__(&self) -> usize {
        self.index.len()
    }

    #[pyo3(signature = (vector, k=10))]
    fn search(&self, vector: Vec<f64>, k: usize) -> PyResult<Vec<(String, f64)>> {
        self.index.search("query", &vector, k).map(ranked).map_err(err)
    }
}

/// A trained checkpoint directory written by `topic-dpr train`.
#[pyclass(module = "topicdpr")]
struct Checkpoint {
    run: LoadedRun,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self { run: LoadedRun::load(&dir).map_err(err)? })
    }

    #[getter]
    fn mode(&self) -> String {
        self.run.trainer.config.mode.to_string()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.run.trainer.model.encoder.config.dim
    }

    /// Representation of free text, routed to a prompt by its words.
    fn encode(&self, text: &str) -> PyResult<Vec<f64>> {
        let tokens = corpus::tokenize(text);
        let prompt = self.run.router().and_then(|r| r.for_text("text", &tokens)).map_err(err)?;
        let t = EvalText { id: "text".into(), categories: BTreeSet::new(), tokens: self.run.vocab.encode(&tokens), prompt };
        Ok(encode_texts(&self.run.trainer.model, std::slice::from_ref(&t)).map_err(err)?.remove(0))
    }

    /// Titles against abstracts of `docs`.
    #[pyo3(signature = (docs, ks=vec![1, 10, 50], filter_self=false))]
    fn evaluate<'py>(&self, py: Python<'py>, docs: Vec<Bound<'py, PyDict>>, ks: Vec<usize>, filter_self: bool) -> PyResult<Bound<'py, PyDict>> {
        let set = self.run.eval_set(&documents(docs)?).map_err(err)?;
        let (_, report) = evaluate_dev(&self.run.trainer.model, &set, &ks, filter_self).map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("acc", report.acc)?;
        out.set_item("mrr", report.mrr)?;
        out.set_item("map", report.map)?;
        out.set_item("queries", report.queries)?;
        Ok(out)
    }
}

#[pymodule]
fn topicdpr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("TopicDprError", m.py().get_type::<TopicDprError>())?;
    m.add_class::<TopicModel>()?;
    m.add_class::<Bm25>()?;
    m.add_class::<DenseIndex>()?;
    m.add_class::<Checkpoint>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(load_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
