//! Python bindings: corpus generation, training, evaluation, transmitting
//! scores and the KGE kernels.

use std::collections::HashSet;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use constgcn::corpus::{corpus_to_json, generate_split, parse_corpus, Document, RelationSchema, SynthConfig};
use constgcn::kge::{KgeKind, KgeVariant};
use constgcn::trainer::{evaluate_with_scores, mark_corpus, train_fact_set, Checkpoint, TrainConfig};
use constgcn::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Parse(_) | Error::Domain(_) | Error::Incompatible(_) | Error::Shape(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// A set of documents plus the relation schema they use.
#[pyclass(name = "Corpus", skip_from_py_object)]
pub struct PyCorpus {
    docs: Vec<Document>,
    schema: RelationSchema,
}

#[pymethods]
impl PyCorpus {
    /// Parse corpus JSON with relation names from `relations`.
    #[new]
    fn new(json: &str, relations: Vec<String>) -> PyResult<Self> {
        let schema = RelationSchema::new(relations).map_err(py_err)?;
        let docs = parse_corpus(json, Some(&schema)).map_err(py_err)?;
        Ok(PyCorpus { docs, schema })
    }

    fn __len__(&self) -> usize {
        self.docs.len()
    }

    #[getter]
    fn doc_ids(&self) -> Vec<String> {
        self.docs.iter().map(|d| d.doc_id.clone()).collect()
    }

    #[getter]
    fn relations(&self) -> Vec<String> {
        self.schema.relations.clone()
    }

    /// Gold facts of one document as `(head, relation, tail)`.
    fn facts(&self, index: usize) -> PyResult<Vec<(usize, usize, usize)>> {
        let d = self.docs.get(index).ok_or_else(|| PyValueError::new_err("document index out of range"))?;
        Ok(d.facts.iter().map(|f| (f.head, f.relation, f.tail)).collect())
    }

    fn num_entities(&self, index: usize) -> PyResult<usize> {
        let d = self.docs.get(index).ok_or_else(|| PyValueError::new_err("document index out of range"))?;
        Ok(d.num_entities())
    }

    fn to_json(&self) -> PyResult<String> {
        corpus_to_json(&self.docs).map_err(py_err)
    }
}

/// Synthetic train and dev corpora sharing one schema.
#[pyfunction]
#[pyo3(signature = (train_docs=200, dev_docs=50, relations=5, seed=7))]
fn generate(train_docs: usize, dev_docs: usize, relations: usize, seed: u64) -> PyResult<(PyCorpus, PyCorpus)> {
    let synth = SynthConfig { num_relations: relations, seed, ..SynthConfig::default() };
    let (train, dev) = generate_split(&synth, train_docs, dev_docs).map_err(py_err)?;
    let schema = synth.schema();
    Ok((PyCorpus { docs: train, schema: schema.clone() }, PyCorpus { docs: dev, schema }))
}

/// A trained model with the config text that produced it.
#[pyclass(name = "Model")]
pub struct PyModel {
    ckpt: Checkpoint,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel { ckpt: Checkpoint::load(path).map_err(py_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.ckpt.save(path).map_err(py_err)
    }

    #[getter]
    fn layers(&self) -> usize {
        self.ckpt.model.config.gcn.layers
    }

    #[getter]
    fn config(&self) -> String {
        self.ckpt.train_config.clone()
    }

    /// Metrics on `corpus` as a dict; `train` excludes its facts from Ign F1.
    #[pyo3(signature = (corpus, train=None))]
    fn evaluate(&self, py: Python<'_>, corpus: &PyCorpus, train: Option<&PyCorpus>) -> PyResult<Py<PyAny>> {
        let model = &self.ckpt.model;
        model.check_compatible(&corpus.docs).map_err(py_err)?;
        let keys = train.map_or_else(HashSet::new, |t| train_fact_set(&t.docs));
        let ev = evaluate_with_scores(model, &corpus.docs, &keys).map_err(py_err)?;
        let dict = pyo3::types::PyDict::new(py);
        dict.set_item("micro_f1", ev.report.micro_f1)?;
        dict.set_item("ign_f1", ev.report.ign_f1)?;
        dict.set_item("auc", ev.report.auc)?;
        dict.set_item("precision", ev.report.precision)?;
        dict.set_item("recall", ev.report.recall)?;
        dict.set_item("transmit_auc", ev.transmit.map(|t| t.auc))?;
        Ok(dict.into_any().unbind())
    }

    /// Predicted facts for one document.
    fn predict(&self, corpus: &PyCorpus, index: usize) -> PyResult<Vec<(usize, usize, usize)>> {
        let doc = corpus.docs.get(index).ok_or_else(|| PyValueError::new_err("document index out of range"))?;
        let marked = mark_corpus(&self.ckpt.model, std::slice::from_ref(doc)).map_err(py_err)?;
        let pred = self.ckpt.model.predict(&marked[0]).map_err(py_err)?;
        Ok(pred.decoded().iter().map(|f| (f.head, f.relation, f.tail)).collect())
    }

    /// Transmitting scores of one relation at one layer, as rows.
    fn transmit_scores(&self, corpus: &PyCorpus, index: usize, relation: usize, layer: usize) -> PyResult<Vec<Vec<f64>>> {
        let doc = corpus.docs.get(index).ok_or_else(|| PyValueError::new_err("document index out of range"))?;
        let marked = mark_corpus(&self.ckpt.model, std::slice::from_ref(doc)).map_err(py_err)?;
        let pred = self.ckpt.model.predict(&marked[0]).map_err(py_err)?;
        let scores = pred.scores.get(layer).ok_or_else(|| PyValueError::new_err("layer out of range"))?;
        if relation >= scores.num_relations() {
            return Err(PyValueError::new_err("relation out of range"));
        }
        let n = scores.num_entities();
        Ok((0..n).map(|i| (0..n).map(|j| scores.get(relation, i, j)).collect()).collect())
    }
}

/// Train on `train`, select by dev F1. `config` holds `key = value` lines.
/// Returns the model and per-epoch history rows as dicts.
#[pyfunction]
#[pyo3(signature = (train, dev, config=""))]
fn fit(py: Python<'_>, train: &PyCorpus, dev: &PyCorpus, config: &str) -> PyResult<(PyModel, Vec<Py<PyAny>>)> {
    let cfg = TrainConfig::from_text(config).map_err(py_err)?;
    cfg.validate().map_err(py_err)?;
    let out = py
        .detach(|| constgcn::trainer::train(&train.docs, &dev.docs, &train.schema, &cfg))
        .map_err(py_err)?;
    let history = out
        .history
        .iter()
        .map(|r| {
            let d = pyo3::types::PyDict::new(py);
            d.set_item("epoch", r.epoch)?;
            d.set_item("l_cls", r.l_cls)?;
            d.set_item("l_nce", r.l_nce)?;
            d.set_item("dev_f1", r.dev_f1)?;
            d.set_item("dev_ign_f1", r.dev_ign_f1)?;
            d.set_item("dev_auc", r.dev_auc)?;
            d.set_item("transmit_auc", r.transmit_auc)?;
            Ok(d.into_any().unbind())
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((PyModel { ckpt: Checkpoint { model: out.best, train_config: cfg.to_text() } }, history))
}

fn variant(name: &str, margin: f64) -> PyResult<KgeVariant> {
    let kind: KgeKind = name.parse().map_err(py_err)?;
    KgeVariant::new(kind, margin).map_err(py_err)
}

/// Triple score `d_r(e_i, r, e_j)`.
#[pyfunction]
#[pyo3(signature = (kind, e_i, r, e_j, margin=20.0))]
fn score(kind: &str, e_i: Vec<f64>, r: Vec<f64>, e_j: Vec<f64>, margin: f64) -> PyResult<f64> {
    constgcn::kge::score(&variant(kind, margin)?, &e_i, &r, &e_j).map_err(py_err)
}

/// `σ(d_r(e_i, r, e_j))`.
#[pyfunction]
#[pyo3(signature = (kind, e_i, r, e_j, margin=20.0))]
fn transmit_score(kind: &str, e_i: Vec<f64>, r: Vec<f64>, e_j: Vec<f64>, margin: f64) -> PyResult<f64> {
    constgcn::kge::transmit_score(&variant(kind, margin)?, &e_i, &r, &e_j).map_err(py_err)
}

/// The transmitting operation `e ⊕ r`.
#[pyfunction]
fn transmit(kind: &str, e: Vec<f64>, r: Vec<f64>) -> PyResult<Vec<f64>> {
    constgcn::kge::transmit(&variant(kind, 20.0)?, &e, &r).map_err(py_err)
}

#[pymodule]
fn constgcn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(transmit_score, m)?)?;
    m.add_function(wrap_pyfunction!(transmit, m)?)?;
    Ok(())
}
