//! Python bindings. Structured results cross the boundary as plain dicts and
//! lists.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::Serialize;

use mcforge::assistant::{self, ChunkParams, HashEmbedder, IngestOptions, VectorStore};
use mcforge::deck;
use mcforge::microdose::{self, LinearSpectrum, QualityKernel, SiteGeometry, SumConvention};
use mcforge::postproc::{self, TabRow};
use mcforge::stats;
use mcforge::workflow::{self, AutoApprove, Mode, WorkflowConfig};

create_exception!(mcforge, McforgeError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    McforgeError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn rows(data: Vec<(f64, f64, f64, f64)>) -> Vec<TabRow> {
    data.into_iter().map(|(a, b, c, d)| TabRow::new(a, b, c, d)).collect()
}

/// Primaries needed to bring `current_u` down to `target_u`.
#[pyfunction]
#[pyo3(signature = (current_u, target_u, current_nps, granularity = stats::DEFAULT_GRANULARITY))]
fn required_nps(current_u: f64, target_u: f64, current_nps: u64, granularity: u64) -> PyResult<u64> {
    Ok(stats::required_nps(current_u, target_u, current_nps, granularity)
        .map_err(err)?
        .required_nps)
}

/// Value-weighted mean of the percent errors of `(elow, ehigh, value, err_pct)` rows.
#[pyfunction]
fn average_uncertainty(data: Vec<(f64, f64, f64, f64)>) -> PyResult<f64> {
    Ok(stats::average_uncertainty(&rows(data)).map_err(err)?.average_uncertainty)
}

/// Count-weighted mean bin midpoint of `(elow, ehigh, counts)` rows.
#[pyfunction]
fn average_energy(data: Vec<(f64, f64, f64)>) -> PyResult<f64> {
    stats::average_energy(&data).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (y, kernel = "icru40"))]
fn quality_factor(y: f64, kernel: &str) -> PyResult<f64> {
    microdose::quality_kernel(y, kernel).map_err(err)
}

/// Rows of a `_tab.lis` listing.
#[pyfunction]
fn parse_tab(text: &str) -> PyResult<Vec<(f64, f64, f64, f64)>> {
    let section = postproc::parse_tab(text).map_err(err)?;
    Ok(section.rows.iter().map(|r| (r.elow, r.ehigh, r.value, r.err_pct)).collect())
}

/// Store entry for a `_sum.lis` listing.
#[pyfunction]
fn parse_sum<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    let entry = postproc::entry_from_text(postproc::EntryKind::Sum, text).map_err(err)?;
    to_py(py, &entry)
}

/// Rewrite one value in a parameter CSV.
#[pyfunction]
fn update_params(path: PathBuf, name: &str, value: &str) -> PyResult<()> {
    workflow::update_params(&path, name, value).map_err(err)
}

/// Microdosimetric summary of an energy spectrum given as
/// `(elow, ehigh, value, err_pct)` rows.
#[pyfunction]
#[pyo3(signature = (data, dt = 50.0, clf = 2.0 / 3.0, bins_per_decade = microdose::DEFAULT_BINS_PER_DECADE, kernel = "icru40", literal_sums = false))]
fn microdosimetry<'py>(
    py: Python<'py>,
    data: Vec<(f64, f64, f64, f64)>,
    dt: f64,
    clf: f64,
    bins_per_decade: usize,
    kernel: &str,
    literal_sums: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let geom = SiteGeometry::new(dt, clf, 0).map_err(err)?;
    let energy = LinearSpectrum::from_rows(&rows(data)).map_err(err)?;
    let log = microdose::rebin_energy_spectrum(&energy, &geom, None, bins_per_decade).map_err(err)?;
    let convention = if literal_sums {
        SumConvention::AppendixLiteralSums
    } else {
        SumConvention::Weighted
    };
    let spectra =
        microdose::compute_spectra(&log, QualityKernel::from_id(kernel).map_err(err)?, convention).map_err(err)?;
    to_py(py, &spectra.summary())
}

/// Overlapping chunks of `text` as dicts.
#[pyfunction]
#[pyo3(signature = (text, size = assistant::DEFAULT_CHUNK_SIZE, overlap = assistant::DEFAULT_OVERLAP))]
fn chunk_text<'py>(py: Python<'py>, text: &str, size: usize, overlap: usize) -> PyResult<Bound<'py, PyAny>> {
    let chunks = assistant::chunk_document(text, ChunkParams { size, overlap }).map_err(err)?;
    to_py(py, &chunks)
}

/// A parsed input deck.
#[pyclass(module = "mcforge", name = "InputDeck")]
struct PyInputDeck {
    inner: deck::InputDeck,
}

#[pymethods]
impl PyInputDeck {
    #[staticmethod]
    fn parse(text: &str) -> Self {
        PyInputDeck {
            inner: deck::parse_deck(text),
        }
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(PyInputDeck {
            inner: deck::InputDeck::read(&path).map_err(err)?,
        })
    }

    fn render(&self) -> PyResult<String> {
        deck::render_deck(&self.inner).map_err(err)
    }

    /// Keywords of the cards, in order.
    fn keywords(&self) -> Vec<String> {
        self.inner.cards().map(|c| c.keyword.clone()).collect()
    }

    /// `{name}` placeholders used by the deck.
    fn placeholders(&self) -> Vec<String> {
        deck::placeholders(&self.inner)
    }

    /// Write one deck per cycle and return their paths.
    #[pyo3(signature = (params_path, output_dir, prefix = "example", cycles = 5, base_seed = 1))]
    fn generate_cycles(
        &self,
        params_path: PathBuf,
        output_dir: PathBuf,
        prefix: &str,
        cycles: usize,
        base_seed: i64,
    ) -> PyResult<Vec<PathBuf>> {
        let params = deck::load_parameters(&params_path).map_err(err)?;
        let plan = deck::CyclePlan {
            prefix: prefix.to_string(),
            count: cycles,
            base_seed,
            output_dir,
        };
        deck::generate_cycles(&self.inner, &params, &plan).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.cards().count()
    }
}

/// A persistent vector store searched with the built-in hashing embedder.
#[pyclass(module = "mcforge", name = "DocumentIndex")]
struct PyDocumentIndex {
    dir: PathBuf,
}

#[pymethods]
impl PyDocumentIndex {
    #[new]
    fn new(dir: PathBuf) -> Self {
        PyDocumentIndex { dir }
    }

    /// Add new documents from `docs`; returns `(new_docs, new_chunks)`.
    fn ingest(&self, docs: PathBuf) -> PyResult<(usize, usize)> {
        let counts = assistant::ingest(&docs, &self.dir, &mut HashEmbedder::default(), &IngestOptions::default())
            .map_err(err)?;
        Ok((counts.new_docs, counts.new_chunks))
    }

    /// Top-k `(chunk_id, score, text)` for `query`.
    #[pyo3(signature = (query, k = 4))]
    fn search(&self, query: &str, k: usize) -> PyResult<Vec<(String, f64, String)>> {
        let store = VectorStore::open(&self.dir).map_err(err)?;
        let hits = assistant::retrieve(query, &store, &mut HashEmbedder::default(), k).map_err(err)?;
        Ok(hits.into_iter().map(|h| (h.chunk.id(), h.score, h.chunk.text)).collect())
    }

    fn __len__(&self) -> PyResult<usize> {
        Ok(VectorStore::open(&self.dir).map_err(err)?.len())
    }
}

/// Run the pipeline with the mock engine and return the outcome as a dict.
#[pyfunction]
#[pyo3(signature = (template, params, output_dir, cycles = 5, target = 10.0, monitor_unit = 46, microdosimetry = false, max_refinements = 1))]
#[allow(clippy::too_many_arguments)]
fn run_mock_workflow<'py>(
    py: Python<'py>,
    template: PathBuf,
    params: PathBuf,
    output_dir: PathBuf,
    cycles: usize,
    target: f64,
    monitor_unit: u8,
    microdosimetry: bool,
    max_refinements: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = WorkflowConfig::new(template, params, output_dir);
    cfg.cycles = cycles;
    cfg.uncertainty_target = target;
    cfg.monitor_unit = monitor_unit;
    cfg.max_refinements = max_refinements;
    if microdosimetry {
        cfg.mode = Mode::Microdosimetry;
    }
    let outcome = py
        .detach(|| workflow::run_workflow(cfg, &mut AutoApprove))
        .map_err(err)?;
    to_py(py, &outcome)
}

#[pymodule]
#[pyo3(name = "mcforge")]
pub fn mcforge_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("McforgeError", m.py().get_type::<McforgeError>())?;
    m.add_function(wrap_pyfunction!(required_nps, m)?)?;
    m.add_function(wrap_pyfunction!(average_uncertainty, m)?)?;
    m.add_function(wrap_pyfunction!(average_energy, m)?)?;
    m.add_function(wrap_pyfunction!(quality_factor, m)?)?;
    m.add_function(wrap_pyfunction!(parse_tab, m)?)?;
    m.add_function(wrap_pyfunction!(parse_sum, m)?)?;
    m.add_function(wrap_pyfunction!(update_params, m)?)?;
    m.add_function(wrap_pyfunction!(microdosimetry, m)?)?;
    m.add_function(wrap_pyfunction!(chunk_text, m)?)?;
    m.add_function(wrap_pyfunction!(run_mock_workflow, m)?)?;
    m.add_class::<PyInputDeck>()?;
    m.add_class::<PyDocumentIndex>()?;
    Ok(())
}
