//! Python bindings for the `vidkg` engine and its scoring primitives.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;
use serde::Serialize;

use vidkg::agent_search;
use vidkg::config::AppConfig;
use vidkg::ekg::EventId;
use vidkg::engine::{Engine as CoreEngine, EngineError, QueryOverrides};
use vidkg::entity_linker::{self, ClusteringConfig};
use vidkg::generation::{self, CandidateAnswer};
use vidkg::ingestion::{self, ChunkingConfig, SimilarityMatrix};
use vidkg::retrieval::{self, View, ViewResult};

create_exception!(pyvidkg, VidkgError, PyException, "Raised for engine failures; `args[0]` is the error code.");

fn engine_err(e: EngineError) -> PyErr {
    VidkgError::new_err((e.code().as_str(), e.to_string(), e.exit_code()))
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Ingestion and question answering over a persistent graph store.
#[pyclass(name = "Engine", frozen)]
struct PyEngine {
    inner: CoreEngine,
}

#[pymethods]
impl PyEngine {
    /// Opens the store described by a TOML config file.
    #[new]
    fn new(config_path: PathBuf) -> PyResult<Self> {
        let config = AppConfig::load(&config_path).map_err(|e| engine_err(e.into()))?;
        Ok(Self { inner: CoreEngine::open(config).map_err(engine_err)? })
    }

    /// Builds from a TOML string; relative paths resolve against `base_dir`.
    #[staticmethod]
    #[pyo3(signature = (text, base_dir = PathBuf::from(".")))]
    fn from_toml(text: &str, base_dir: PathBuf) -> PyResult<Self> {
        let config = AppConfig::parse(text, &base_dir).map_err(|e| engine_err(e.into()))?;
        Ok(Self { inner: CoreEngine::open(config).map_err(engine_err)? })
    }

    fn ingest<'py>(&self, py: Python<'py>, source: &str) -> PyResult<Bound<'py, PyAny>> {
        let report = py.detach(|| self.inner.ingest_source(source)).map_err(engine_err)?;
        to_py(py, &report)
    }

    #[pyo3(signature = (text, depth = None, k = None))]
    fn query<'py>(&self, py: Python<'py>, text: &str, depth: Option<usize>, k: Option<usize>) -> PyResult<Bound<'py, PyAny>> {
        let out = py.detach(|| self.inner.query(text, QueryOverrides { depth, k })).map_err(engine_err)?;
        to_py(py, &out)
    }

    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.stats())
    }
}

/// Fuses per-view `{event_id: similarity}` maps into one score per event.
#[pyfunction]
fn borda_scores(views: BTreeMap<String, BTreeMap<String, f64>>) -> PyResult<BTreeMap<String, f64>> {
    let views = views
        .into_iter()
        .map(|(name, hits)| {
            let view = View::ALL
                .into_iter()
                .find(|v| v.as_str() == name)
                .ok_or_else(|| PyValueError::new_err(format!("unknown view {name:?}")))?;
            let hits: ViewResult = hits.into_iter().map(|(e, s)| (EventId::new(e), s)).collect();
            Ok((view, hits))
        })
        .collect::<PyResult<Vec<_>>>()?;
    let outcome = retrieval::borda_scores(&views);
    Ok(outcome.scores.into_iter().map(|(e, s)| (e.to_string(), s)).collect())
}

/// Groups consecutive chunks given their pairwise similarity matrix.
/// Returns half-open `(start, end)` chunk ranges.
#[pyfunction]
#[pyo3(signature = (similarity, tau_in = None, max_span = None))]
fn merge_semantic(similarity: Vec<Vec<f64>>, tau_in: Option<f64>, max_span: Option<usize>) -> PyResult<Vec<(usize, usize)>> {
    let n = similarity.len();
    if similarity.iter().any(|row| row.len() != n) {
        return Err(PyValueError::new_err("similarity must be a square matrix"));
    }
    let mut cfg = ChunkingConfig::default();
    cfg.tau_in = tau_in.unwrap_or(cfg.tau_in);
    cfg.max_merge_span = max_span.unwrap_or(cfg.max_merge_span);
    let matrix = SimilarityMatrix::from_fn(n, |i, j| similarity[i][j]);
    let groups = ingestion::merge_semantic(n, &matrix, &cfg).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(groups.into_iter().map(|r| (r.start, r.end)).collect())
}

type KMeansTuple = (Vec<usize>, Vec<Vec<f64>>, Vec<f64>);

/// K-means++ clustering. Returns `(assignments, centroids, objective_per_iteration)`.
#[pyfunction]
#[pyo3(signature = (points, k, seed = 0))]
fn kmeans(points: Vec<Vec<f32>>, k: usize, seed: u64) -> PyResult<KMeansTuple> {
    if points.is_empty() || k == 0 {
        return Err(PyValueError::new_err("need at least one point and k >= 1"));
    }
    if points.iter().any(|p| p.len() != points[0].len()) {
        return Err(PyValueError::new_err("points must share one dimension"));
    }
    let refs: Vec<&[f32]> = points.iter().map(Vec::as_slice).collect();
    let out = entity_linker::kmeans(&refs, k, &ClusteringConfig { seed, ..ClusteringConfig::default() });
    Ok((out.assignments, out.centroids, out.objective))
}

/// Number of answerable leaves a search of `depth` levels produces.
#[pyfunction]
fn leaf_count(depth: usize) -> usize {
    agent_search::leaf_count(depth)
}

/// Scores `(answer, trace)` samples. `pair_score(trace_a, trace_b)` rates how
/// well two reasoning traces agree, in `[0, 1]`. Returns dicts ordered by answer.
#[pyfunction]
#[pyo3(signature = (samples, pair_score, weight = 0.3))]
fn score_answers<'py>(
    py: Python<'py>,
    samples: Vec<(String, String)>,
    pair_score: Bound<'py, PyAny>,
    weight: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let candidates: Vec<CandidateAnswer> = samples
        .into_iter()
        .enumerate()
        .map(|(i, (answer, trace))| CandidateAnswer { answer, trace, sample_index: i })
        .collect();
    let scores = generation::score_answers_with(&candidates, weight, |a, b| {
        pair_score.call1((a, b))?.extract::<f64>()
    })?;
    to_py(py, &scores)
}

#[pymodule]
fn pyvidkg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEngine>()?;
    m.add("VidkgError", m.py().get_type::<VidkgError>())?;
    m.add_function(wrap_pyfunction!(borda_scores, m)?)?;
    m.add_function(wrap_pyfunction!(merge_semantic, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(leaf_count, m)?)?;
    m.add_function(wrap_pyfunction!(score_answers, m)?)?;
    Ok(())
}
