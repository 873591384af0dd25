//! Python bindings. Structured values cross the boundary as plain
//! dicts and lists with the same field names as the Rust types.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rxunify::config::RunConfig;
use rxunify::evaluator::{evaluate as evaluate_records, render_report, EvalConfig, GroundTruthRecord, ScoredOutput};
use rxunify::extraction::ExtractionOutcome;
use rxunify::pipeline::{clean_inputs, run_in_memory};
use rxunify::postprocess::{postprocess as postprocess_records, DrugNormTable, PostprocessConfig};
use rxunify::schema::{load_format_spec, ClinicId, RawRecord, UnifiedPrescription};
use rxunify::synth::{generate, write_corpus, GenSpec};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

fn core_err(e: rxunify::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn opt_from_py<T: DeserializeOwned + Default>(obj: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    obj.map(from_py).transpose().map(Option::unwrap_or_default)
}

/// Parse a SIG string into daily quantity, frequency, duration and cues.
#[pyfunction]
#[pyo3(signature = (text, drug_name=None))]
fn parse_sig<'py>(py: Python<'py>, text: &str, drug_name: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &rxunify::sig::parse_sig(text, drug_name))
}

/// MOUD days for one unified prescription dict.
#[pyfunction]
fn compute_moud_days<'py>(record: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let r: UnifiedPrescription = from_py(record)?;
    to_py(record.py(), &rxunify::moud::compute_moud_days(0, &r))
}

/// Rule-based extraction of one raw row given as `{column: value}`.
#[pyfunction]
#[pyo3(signature = (clinic, fields, row=0))]
fn extract_rules<'py>(clinic: &str, fields: &Bound<'py, PyDict>, row: usize) -> PyResult<Bound<'py, PyAny>> {
    let spec = load_format_spec(clinic).map_err(core_err)?;
    let pairs: Vec<(String, String)> = fields
        .iter()
        .map(|(k, v)| Ok((k.extract()?, v.str()?.to_string())))
        .collect::<PyResult<_>>()?;
    let raw = RawRecord::new(ClinicId::new(clinic).map_err(core_err)?, pairs).map_err(core_err)?;
    let outcome = rxunify::extraction::extract_rules(&raw, spec, row).map_err(core_err)?;
    to_py(fields.py(), &outcome)
}

/// Clean a list of extraction outcomes. Returns records, flags and norms.
#[pyfunction]
#[pyo3(signature = (outcomes, config=None, norms=None))]
fn postprocess<'py>(
    outcomes: &Bound<'py, PyAny>,
    config: Option<&Bound<'py, PyAny>>,
    norms: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let py = outcomes.py();
    let outcomes: Vec<ExtractionOutcome> = from_py(outcomes)?;
    let cfg: PostprocessConfig = opt_from_py(config)?;
    let norms: Option<DrugNormTable> = norms.map(from_py).transpose()?;
    to_py(py, &postprocess_records(clean_inputs(&outcomes), &cfg, norms.as_ref()))
}

/// Score outputs against ground truth. Returns the report and its text table.
#[pyfunction]
#[pyo3(signature = (ground_truth, outputs, config=None))]
fn evaluate<'py>(
    ground_truth: &Bound<'py, PyAny>,
    outputs: &Bound<'py, PyAny>,
    config: Option<&Bound<'py, PyAny>>,
) -> PyResult<(Bound<'py, PyAny>, String)> {
    let gt: Vec<GroundTruthRecord> = from_py(ground_truth)?;
    let outs: Vec<ScoredOutput> = from_py(outputs)?;
    let cfg: EvalConfig = opt_from_py(config)?;
    let report = evaluate_records(&gt, &outs, &cfg);
    let (_, table) = render_report(&report);
    Ok((to_py(ground_truth.py(), &report)?, table))
}

/// Write a synthetic corpus to `out_dir` and return its manifest.
#[pyfunction]
#[pyo3(signature = (out_dir, spec=None))]
fn generate_corpus<'py>(py: Python<'py>, out_dir: PathBuf, spec: Option<&Bound<'py, PyAny>>) -> PyResult<Bound<'py, PyAny>> {
    let spec: GenSpec = opt_from_py(spec)?;
    let corpus = generate(&spec).map_err(core_err)?;
    write_corpus(&corpus, &out_dir).map_err(core_err)?;
    to_py(py, &corpus.manifest)
}

/// End-to-end run over configured inputs, kept in memory.
#[pyclass]
struct Pipeline {
    config: RunConfig,
}

#[pymethods]
impl Pipeline {
    /// Load a TOML run configuration.
    #[staticmethod]
    fn from_config(path: PathBuf) -> PyResult<Self> {
        Ok(Pipeline {
            config: RunConfig::load(&path).map_err(core_err)?,
        })
    }

    /// Use a generated corpus directory as input and ground truth.
    #[staticmethod]
    fn from_corpus(dir: PathBuf) -> PyResult<Self> {
        Ok(Pipeline {
            config: RunConfig::for_corpus(&dir).map_err(core_err)?,
        })
    }

    #[getter]
    fn workers(&self) -> usize {
        self.config.workers
    }

    #[setter]
    fn set_workers(&mut self, workers: usize) {
        self.config.workers = workers;
    }

    fn config_toml(&self) -> String {
        self.config.to_toml()
    }

    /// Returns a dict with outcomes, records, flags, moud, patients and report.
    fn run<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let run = py.detach(|| run_in_memory(&self.config)).map_err(core_err)?;
        let c = &run.computed;
        let doc: Value = serde_json::json!({
            "outcomes": run.outcomes,
            "records": c.post.records,
            "flags": c.post.flags,
            "norms": c.post.norms,
            "moud": c.moud,
            "patients": c.patients,
            "report": run.report,
        });
        to_py(py, &doc)
    }
}

#[pymodule]
fn rxunify_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(parse_sig, m)?)?;
    m.add_function(wrap_pyfunction!(compute_moud_days, m)?)?;
    m.add_function(wrap_pyfunction!(extract_rules, m)?)?;
    m.add_function(wrap_pyfunction!(postprocess, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_class::<Pipeline>()?;
    Ok(())
}
