//! Python bindings: corpus records, dictionaries, code-switching, checkpoint
//! inference, training and the evaluation metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xslu::checkpoint::{self, ModelBundle};
use xslu::cli::commands::{self, TrainArgs};
use xslu::cli::config::RunConfig;
use xslu::codeswitch::{self, BilingualDictionary, CodeSwitchConfig};
use xslu::corpus::{self, SlotSpan};
use xslu::evalkit::{self, PredictionRecord};
use xslu::lajoint::PredictionLine;

fn to_py(e: xslu::Error) -> PyErr {
    match e {
        xslu::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        xslu::Error::Numerical(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

#[pyclass(name = "Utterance", module = "xslu_py", from_py_object)]
#[derive(Clone)]
pub struct PyUtterance {
    inner: corpus::Utterance,
}

#[pymethods]
impl PyUtterance {
    #[new]
    #[pyo3(signature = (id, intent, tokens, slots, locale = "en".to_string()))]
    fn new(id: String, intent: String, tokens: Vec<String>, slots: Vec<String>, locale: String) -> PyResult<Self> {
        let inner = corpus::Utterance {
            id,
            locale,
            intent,
            tokens,
            slots,
        };
        if inner.tokens.len() != inner.slots.len() {
            return Err(PyValueError::new_err(format!(
                "{} tokens but {} slot tags",
                inner.tokens.len(),
                inner.slots.len()
            )));
        }
        corpus::check_bio(&inner.slots).map_err(to_py)?;
        Ok(PyUtterance { inner })
    }

    #[getter]
    fn id(&self) -> &str {
        &self.inner.id
    }

    #[getter]
    fn locale(&self) -> &str {
        &self.inner.locale
    }

    #[getter]
    fn intent(&self) -> &str {
        &self.inner.intent
    }

    #[getter]
    fn tokens(&self) -> Vec<String> {
        self.inner.tokens.clone()
    }

    #[getter]
    fn slots(&self) -> Vec<String> {
        self.inner.slots.clone()
    }

    /// Slot spans as `(start, end, slot)` with `end` exclusive.
    fn spans(&self) -> Vec<(usize, usize, String)> {
        spans_tuples(self.inner.spans())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Utterance(id={:?}, intent={:?}, tokens={:?})", self.inner.id, self.inner.intent, self.inner.tokens)
    }
}

fn spans_tuples(spans: Vec<SlotSpan>) -> Vec<(usize, usize, String)> {
    spans.into_iter().map(|s| (s.start, s.end, s.slot)).collect()
}

#[pyfunction]
fn read_corpus(path: PathBuf) -> PyResult<Vec<PyUtterance>> {
    let us: Vec<corpus::Utterance> = corpus::read_jsonl(&path).map_err(to_py)?;
    Ok(us.into_iter().map(|inner| PyUtterance { inner }).collect())
}

#[pyfunction]
fn extract_spans(tags: Vec<String>) -> Vec<(usize, usize, String)> {
    spans_tuples(corpus::extract_spans(&tags))
}

#[pyclass(name = "Dictionary", module = "xslu_py", from_py_object)]
#[derive(Clone)]
pub struct PyDictionary {
    inner: BilingualDictionary,
}

#[pymethods]
impl PyDictionary {
    #[new]
    fn new(source_locale: &str, target_locale: &str, pairs: Vec<(String, String)>) -> PyResult<Self> {
        let inner = BilingualDictionary::from_pairs(
            source_locale,
            target_locale,
            pairs.iter().map(|(s, t)| (s.as_str(), t.as_str())),
        )
        .map_err(to_py)?;
        Ok(PyDictionary { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf, source_locale: &str, target_locale: &str) -> PyResult<Self> {
        let inner = codeswitch::load_dictionary(&path, source_locale, target_locale).map_err(to_py)?;
        Ok(PyDictionary { inner })
    }

    fn lookup(&self, word: &str) -> Option<Vec<String>> {
        self.inner.lookup(word).map(<[String]>::to_vec)
    }

    #[getter]
    fn source_locale(&self) -> &str {
        &self.inner.source_locale
    }

    #[getter]
    fn target_locale(&self) -> &str {
        &self.inner.target_locale
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

type Switched = (Vec<PyUtterance>, Vec<Vec<Option<String>>>);

/// Code-switches each utterance; returns the switched utterances and, per
/// utterance, the locale each token was drawn from (`None` when kept).
#[pyfunction]
#[pyo3(signature = (utterances, dictionaries, sentence_ratio = 1.0, word_ratio = 0.9, seed = 0))]
fn code_switch(
    utterances: Vec<PyUtterance>,
    dictionaries: Vec<PyDictionary>,
    sentence_ratio: f64,
    word_ratio: f64,
    seed: u64,
) -> PyResult<Switched> {
    let cfg = CodeSwitchConfig {
        sentence_ratio,
        word_ratio,
        target_locales: Vec::new(),
        seed,
    };
    cfg.validate().map_err(to_py)?;
    let dicts: Vec<BilingualDictionary> = dictionaries.into_iter().map(|d| d.inner).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(utterances.len());
    let mut origins = Vec::with_capacity(utterances.len());
    for u in &utterances {
        let s = codeswitch::code_switch(&u.inner, &dicts, &cfg, &mut rng);
        origins.push(s.provenance.iter().map(|p| p.locale.clone()).collect());
        out.push(PyUtterance { inner: s.to_utterance() });
    }
    Ok((out, origins))
}

#[pyclass(name = "Model", module = "xslu_py", unsendable)]
pub struct PyModel {
    bundle: ModelBundle,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(checkpoint_dir: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            bundle: checkpoint::load(&checkpoint_dir).map_err(to_py)?,
        })
    }

    fn save(&self, checkpoint_dir: PathBuf) -> PyResult<()> {
        checkpoint::save(&checkpoint_dir, &self.bundle).map_err(to_py)
    }

    #[getter]
    fn intents(&self) -> Vec<String> {
        self.bundle.net.schema.intents.clone()
    }

    #[getter]
    fn slots(&self) -> Vec<String> {
        self.bundle.net.schema.slots.clone()
    }

    /// Predicted `(intent, bio_tags)` for one tokenized utterance.
    fn predict(&self, tokens: Vec<String>) -> PyResult<(String, Vec<String>)> {
        let p = self.bundle.net.predict(&self.bundle.store, &tokens).map_err(to_py)?;
        Ok((p.intent, p.slots))
    }

    /// `[CLS]` encoder outputs, one vector per utterance.
    fn represent(&self, utterances: Vec<PyUtterance>) -> PyResult<Vec<Vec<f64>>> {
        let us: Vec<corpus::Utterance> = utterances.into_iter().map(|u| u.inner).collect();
        let reps = evalkit::cls_representations(&self.bundle.net, &self.bundle.store, &us).map_err(to_py)?;
        Ok(reps.into_iter().map(|r| r.vector).collect())
    }

    /// Metrics of this model on labelled utterances.
    fn evaluate<'py>(&self, py: Python<'py>, utterances: Vec<PyUtterance>) -> PyResult<Bound<'py, PyDict>> {
        let us: Vec<corpus::Utterance> = utterances.into_iter().map(|u| u.inner).collect();
        let preds = xslu::lajoint::predict_utterances(&self.bundle.net, &self.bundle.store, &us).map_err(to_py)?;
        let records = evalkit::join_predictions(&us, &preds).map_err(to_py)?;
        metrics_dict(py, &records)
    }
}

fn records_from(gold: Vec<PyUtterance>, pred: Vec<(String, Vec<String>)>) -> PyResult<Vec<PredictionRecord>> {
    if gold.len() != pred.len() {
        return Err(PyValueError::new_err(format!("{} gold but {} predictions", gold.len(), pred.len())));
    }
    let gold: Vec<corpus::Utterance> = gold.into_iter().map(|u| u.inner).collect();
    let preds: Vec<PredictionLine> = gold
        .iter()
        .zip(pred)
        .map(|(g, (intent, slots))| PredictionLine {
            id: g.id.clone(),
            intent,
            slots,
        })
        .collect();
    evalkit::join_predictions(&gold, &preds).map_err(to_py)
}

fn metrics_dict<'py>(py: Python<'py>, records: &[PredictionRecord]) -> PyResult<Bound<'py, PyDict>> {
    let m = evalkit::evaluate(records);
    let d = PyDict::new(py);
    d.set_item("n", m.n)?;
    d.set_item("intent_accuracy", m.intent_accuracy)?;
    d.set_item("slot_f1", m.slot_f1)?;
    d.set_item("slot_precision", m.slot_precision)?;
    d.set_item("slot_recall", m.slot_recall)?;
    d.set_item("semantic_em", m.semantic_em)?;
    d.set_item("intent_correct", m.intent_correct)?;
    d.set_item("em_correct", m.em_correct)?;
    d.set_item("span_true_positives", m.span_true_positives)?;
    d.set_item("pred_spans", m.pred_spans)?;
    d.set_item("gold_spans", m.gold_spans)?;
    Ok(d)
}

/// Intent accuracy, slot F1 and semantic EM; predictions are `(intent, tags)`
/// aligned with `gold`.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    gold: Vec<PyUtterance>,
    pred: Vec<(String, Vec<String>)>,
) -> PyResult<Bound<'py, PyDict>> {
    metrics_dict(py, &records_from(gold, pred)?)
}

#[pyfunction]
fn error_statistics<'py>(
    py: Python<'py>,
    gold: Vec<PyUtterance>,
    pred: Vec<(String, Vec<String>)>,
) -> PyResult<Bound<'py, PyDict>> {
    let e = evalkit::error_statistics(&records_from(gold, pred)?);
    let d = PyDict::new(py);
    d.set_item("n_utterance_err", e.n_utterance_err)?;
    d.set_item("n_slot_num", e.n_slot_num)?;
    d.set_item("n_slot_type", e.n_slot_type)?;
    d.set_item("n_slot_bound", e.n_slot_bound)?;
    d.set_item("n_slot_both", e.n_slot_both)?;
    d.set_item("convention", e.convention)?;
    Ok(d)
}

/// Trains a model and writes the run directory. `overrides` maps config keys
/// (as in the CLI's `--set`) to values, applied on top of `config`.
#[pyfunction]
#[pyo3(signature = (train, valid, outdir, dictionaries = Vec::new(), config = None, overrides = Vec::new(), schema = None, pools = None))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    train: PathBuf,
    valid: PathBuf,
    outdir: PathBuf,
    dictionaries: Vec<String>,
    config: Option<PathBuf>,
    overrides: Vec<(String, String)>,
    schema: Option<PathBuf>,
    pools: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = match config {
        Some(p) => RunConfig::from_file(&p).map_err(to_py)?,
        None => RunConfig::default(),
    };
    for (k, v) in &overrides {
        cfg.set(k, v).map_err(to_py)?;
    }
    let args = TrainArgs {
        train: &train,
        valid: &valid,
        dicts: &dictionaries,
        schema: schema.as_deref(),
        pools: pools.as_deref(),
        outdir: &outdir,
    };
    let m = commands::train_cmd(&cfg, &args).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("intent_accuracy", m.intent_accuracy)?;
    d.set_item("slot_f1", m.slot_f1)?;
    d.set_item("semantic_em", m.semantic_em)?;
    Ok(d)
}

/// Writes the synthetic two-language corpus and a matching `toy.cfg`.
#[pyfunction]
#[pyo3(signature = (out, seed = 0))]
fn make_toy(out: PathBuf, seed: u64) -> PyResult<()> {
    commands::make_toy(seed, &out).map(|_| ()).map_err(to_py)
}

/// Runs the command-line interface in-process and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    xslu::cli::run(std::iter::once("xslu".to_string()).chain(args))
}

#[pymodule]
fn xslu_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyUtterance>()?;
    m.add_class::<PyDictionary>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(read_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(extract_spans, m)?)?;
    m.add_function(wrap_pyfunction!(code_switch, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(error_statistics, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(make_toy, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
