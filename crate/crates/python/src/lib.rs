//! Python bindings for the dialogue knowledge-tracing toolkit.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyList, PyString};
use serde_json::Value;

use dialogue_kt::bkt::{self, BktConfig, BktParams, BktPredictor};
use dialogue_kt::config::PipelineConfig;
use dialogue_kt::corpus::{self as core_corpus, AnnotatedDialogue, DatasetFormat, IngestOptions, Part};
use dialogue_kt::eval::experiment::{self, Method};
use dialogue_kt::eval::irr::{self, Level as IrrLevel, RatingMatrix};
use dialogue_kt::eval::metrics;
use dialogue_kt::kt::{collect_predictions, read_records, Aggregation};
use dialogue_kt::synthetic::{self, SyntheticConfig};
use dialogue_kt::taxonomy::{Level, Taxonomy as CoreTaxonomy};

fn err(e: dialogue_kt::Error) -> PyErr {
    match e {
        dialogue_kt::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => PyString::new(py, s).into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for x in items {
                list.append(to_py(py, x)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, x) in map {
                dict.set_item(k, to_py(py, x)?)?;
            }
            dict.into_any()
        }
    })
}

fn serialize<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &serde_json::to_value(value).map_err(json_err)?)
}

/// A JSON string, or any object `json.dumps` accepts.
fn json_text(obj: &Bound<'_, PyAny>) -> PyResult<String> {
    if let Ok(s) = obj.extract::<String>() {
        return Ok(s);
    }
    obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()
}

fn parse_aggregation(s: &str) -> PyResult<Aggregation> {
    match s {
        "mean" => Ok(Aggregation::Mean),
        "product" => Ok(Aggregation::Product),
        other => Err(PyValueError::new_err(format!("unknown aggregation `{other}`"))),
    }
}

/// An ordered collection of annotated dialogues.
#[pyclass(module = "dialogue_kt")]
struct Corpus {
    dialogues: Vec<AnnotatedDialogue>,
}

#[pymethods]
impl Corpus {
    /// Reads a canonical corpus document.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Corpus {
            dialogues: core_corpus::read_canonical(&path).map_err(err)?,
        })
    }

    /// Ingests a raw dataset (`comta`, `mathdial` or `canonical`).
    #[staticmethod]
    fn ingest(path: PathBuf, format: &str) -> PyResult<Self> {
        let format: DatasetFormat = format.parse().map_err(err)?;
        let ingested = core_corpus::ingest_dataset(&path, format, &IngestOptions::default()).map_err(err)?;
        Ok(Corpus {
            dialogues: ingested.dialogues,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let ingested = core_corpus::ingest_str(text, DatasetFormat::Canonical, &IngestOptions::default()).map_err(err)?;
        Ok(Corpus {
            dialogues: ingested.dialogues,
        })
    }

    /// Dialogues labeled by a planted BKT student.
    #[staticmethod]
    #[pyo3(signature = (dialogues = 40, seed = 0))]
    fn synthetic(dialogues: usize, seed: u64) -> PyResult<Self> {
        let cfg = SyntheticConfig {
            dialogues,
            seed,
            ..Default::default()
        };
        Ok(Corpus {
            dialogues: synthetic::generate(&cfg).map_err(err)?.dialogues,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        core_corpus::write_canonical(&path, &self.dialogues).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        core_corpus::to_canonical_json(&self.dialogues).map_err(err)
    }

    fn ids(&self) -> Vec<String> {
        self.dialogues.iter().map(|d| d.id.clone()).collect()
    }

    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        serialize(py, &core_corpus::dataset_statistics(&self.dialogues))
    }

    fn dialogue<'py>(&self, py: Python<'py>, index: usize) -> PyResult<Bound<'py, PyAny>> {
        let d = self
            .dialogues
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("no dialogue {index}")))?;
        let doc: Value = serde_json::from_str(&core_corpus::to_canonical_json(std::slice::from_ref(d)).map_err(err)?).map_err(json_err)?;
        to_py(py, &doc["dialogues"][0])
    }

    fn __len__(&self) -> usize {
        self.dialogues.len()
    }

    fn __repr__(&self) -> String {
        format!("Corpus({} dialogues)", self.dialogues.len())
    }
}

/// Dialogue-level train/val/test assignments per fold.
#[pyclass(module = "dialogue_kt")]
struct SplitPlan {
    plan: core_corpus::SplitPlan,
}

#[pymethods]
impl SplitPlan {
    #[staticmethod]
    #[pyo3(signature = (corpus, folds = 5, val_fraction = 0.2, seed = 0))]
    fn make(corpus: &Corpus, folds: usize, val_fraction: f64, seed: u64) -> PyResult<Self> {
        Ok(SplitPlan {
            plan: core_corpus::make_splits(&corpus.dialogues, folds, val_fraction, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(SplitPlan {
            plan: core_corpus::SplitPlan::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.plan.save(&path).map_err(err)
    }

    #[getter]
    fn fold_count(&self) -> usize {
        self.plan.folds.len()
    }

    /// `(train, val, test)` ids of fold `index`.
    fn fold(&self, index: usize) -> PyResult<(Vec<String>, Vec<String>, Vec<String>)> {
        let f = self
            .plan
            .folds
            .iter()
            .find(|f| f.index == index)
            .ok_or_else(|| PyValueError::new_err(format!("no fold {index}")))?;
        let ids = |p| f.ids(p).into_iter().map(str::to_string).collect();
        Ok((ids(Part::Train), ids(Part::Val), ids(Part::Test)))
    }
}

#[pyclass(module = "dialogue_kt")]
struct Taxonomy {
    inner: CoreTaxonomy,
}

#[pymethods]
impl Taxonomy {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Taxonomy {
            inner: CoreTaxonomy::load(&path).map_err(err)?,
        })
    }

    fn standards(&self) -> Vec<String> {
        self.inner.ids(Level::Standard)
    }

    fn descriptions(&self) -> std::collections::BTreeMap<String, String> {
        self.inner.standard_descriptions()
    }
}

/// Per-KC Bayesian knowledge tracing parameters.
#[pyclass(module = "dialogue_kt")]
struct BktModel {
    params: BktParams,
}

#[pymethods]
impl BktModel {
    #[staticmethod]
    #[pyo3(signature = (corpus, max_iter = 200, restarts = 5, seed = 0))]
    fn fit(corpus: &Corpus, max_iter: usize, restarts: usize, seed: u64) -> PyResult<Self> {
        let cfg = BktConfig {
            max_iter,
            restarts,
            seed,
            ..Default::default()
        };
        Ok(BktModel {
            params: bkt::fit(corpus.dialogues.iter(), &cfg).map_err(err)?.params,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(BktModel {
            params: BktParams::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.params.save(&path).map_err(err)
    }

    fn params<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        serialize(py, &self.params)
    }

    /// Prediction records (dicts) for every labeled pair.
    #[pyo3(signature = (corpus, aggregation = "mean"))]
    fn predict<'py>(&self, py: Python<'py>, corpus: &Corpus, aggregation: &str) -> PyResult<Bound<'py, PyAny>> {
        let predictor = BktPredictor::new(self.params.clone());
        let preds = collect_predictions(&predictor, &corpus.dialogues, parse_aggregation(aggregation)?);
        serialize(py, &preds.records)
    }
}

/// Accuracy, AUC (None when one class is missing) and F1.
#[pyfunction]
fn scores<'py>(py: Python<'py>, labels: Vec<u8>, probs: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
    if labels.len() != probs.len() || labels.is_empty() {
        return Err(PyValueError::new_err("labels and probs must be non-empty and equally long"));
    }
    serialize(
        py,
        &serde_json::json!({
            "acc": metrics::accuracy(&labels, &probs),
            "auc": metrics::auc(&labels, &probs),
            "f1": metrics::f1(&labels, &probs),
        }),
    )
}

/// Correctness probability from per-KC masteries.
#[pyfunction]
#[pyo3(signature = (masteries, aggregation = "mean"))]
fn aggregate(masteries: Vec<f64>, aggregation: &str) -> PyResult<f64> {
    parse_aggregation(aggregation)?.apply(&masteries).map_err(err)
}

/// Overlap and Krippendorff's alpha of an items × raters matrix.
#[pyfunction]
#[pyo3(signature = (ratings, level = "nominal"))]
fn agreement<'py>(py: Python<'py>, ratings: Vec<Vec<Option<i64>>>, level: &str) -> PyResult<Bound<'py, PyAny>> {
    let level: IrrLevel = level.parse().map_err(err)?;
    let m = RatingMatrix::new(ratings).map_err(err)?;
    serialize(py, &irr::irr_metrics(&m, level).map_err(err)?)
}

/// Cross-validated run of `method`; returns the metrics document.
#[pyfunction]
#[pyo3(signature = (method, corpus, plan, config = None, out_dir = None, taxonomy = None))]
fn run_experiment<'py>(
    py: Python<'py>,
    method: &str,
    corpus: &Corpus,
    plan: &SplitPlan,
    config: Option<&Bound<'py, PyAny>>,
    out_dir: Option<PathBuf>,
    taxonomy: Option<&Taxonomy>,
) -> PyResult<Bound<'py, PyAny>> {
    let method: Method = method.parse().map_err(err)?;
    let pipeline: PipelineConfig = match config {
        Some(c) => serde_json::from_str(&json_text(c)?).map_err(json_err)?,
        None => PipelineConfig::default(),
    };
    let cfg = pipeline.experiment(method);
    let descriptions = taxonomy.map(|t| t.inner.standard_descriptions()).unwrap_or_default();
    let outcome = py
        .detach(|| experiment::run_experiment(&cfg, &corpus.dialogues, &plan.plan, &descriptions, out_dir.as_deref()))
        .map_err(err)?;
    serialize(py, &outcome.metrics)
}

/// Knowledge-change curves from a records.jsonl file.
#[pyfunction]
#[pyo3(signature = (records, top_n = 15))]
fn knowledge_curves<'py>(py: Python<'py>, records: PathBuf, top_n: usize) -> PyResult<Bound<'py, PyAny>> {
    let records = read_records(&records).map_err(err)?;
    serialize(py, &dialogue_kt::eval::knowledge_curves(&records, top_n))
}

#[pymodule]
#[pyo3(name = "dialogue_kt")]
fn init_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Corpus>()?;
    m.add_class::<SplitPlan>()?;
    m.add_class::<Taxonomy>()?;
    m.add_class::<BktModel>()?;
    m.add_function(wrap_pyfunction!(scores, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(agreement, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(knowledge_curves, m)?)?;
    Ok(())
}
