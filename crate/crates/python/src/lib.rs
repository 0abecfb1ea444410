//! Python bindings. Validation problems raise `ValueError`, other failures
//! `RuntimeError`.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use cavlex_core::cav_bank::{CavOrigin, CavSet};
use cavlex_core::concept_shap;
use cavlex_core::pipeline::{self, ReportFormat, RunConfig};
use cavlex_core::receptive_field::{ArchSpec, LayerGeom, ReceptiveFields, Rect};
use cavlex_core::synthetic::{planted_bundle, PlantedSpec};
use cavlex_core::tensor_store::{self, DumpBundle};
use cavlex_core::text_matcher::{self, SimilarityMatrix, WpmiParams};
use cavlex_core::Error;

fn py_err(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

type Bounds = (usize, usize, usize, usize);

fn bounds(r: Rect) -> Bounds {
    (r.top, r.left, r.bottom, r.right)
}

fn matrix(rows: Vec<Vec<f64>>, what: &str) -> PyResult<SimilarityMatrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err(format!("{what}: rows differ in length")));
    }
    let n = rows.len();
    SimilarityMatrix::new(n, cols, rows.into_iter().flatten().collect()).map_err(py_err)
}

/// A loaded activation and embedding bundle.
#[pyclass(name = "Bundle", frozen, module = "cavlex")]
struct PyBundle {
    inner: DumpBundle,
}

#[pymethods]
impl PyBundle {
    #[new]
    fn new(manifest: PathBuf) -> PyResult<Self> {
        load_bundle(manifest)
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn grid_hw(&self) -> (usize, usize) {
        self.inner.grid_hw()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    #[getter]
    fn num_texts(&self) -> usize {
        self.inner.num_texts()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn layer(&self) -> String {
        self.inner.meta().layer.clone()
    }

    #[getter]
    fn a_orig(&self) -> f64 {
        self.inner.meta().a_orig
    }

    #[getter]
    fn texts(&self) -> Vec<String> {
        self.inner.texts().to_vec()
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        (0..self.inner.num_classes()).map(|c| self.inner.class_name(c)).collect()
    }

    /// Inclusive `(top, left, bottom, right)` pixel box of position `(u, v)`.
    fn receptive_field(&self, u: usize, v: usize) -> PyResult<Bounds> {
        let fields = ReceptiveFields::new(self.inner.arch()).map_err(py_err)?;
        fields.rect(u, v).map(bounds).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let (h, w) = self.inner.grid_hw();
        format!(
            "Bundle(n={}, grid={h}x{w}, channels={}, texts={}, classes={})",
            self.inner.n(),
            self.inner.channels(),
            self.inner.num_texts(),
            self.inner.num_classes()
        )
    }
}

#[pyfunction]
fn load_bundle(manifest: PathBuf) -> PyResult<PyBundle> {
    let inner = tensor_store::load_bundle(manifest).map_err(py_err)?;
    Ok(PyBundle { inner })
}

/// Writes a synthetic bundle with planted concept directions and returns the
/// manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, n = 2000, directions = 4, seed = 0))]
fn write_planted_bundle(out_dir: PathBuf, n: usize, directions: usize, seed: u64) -> PyResult<String> {
    if n == 0 || !(1..=6).contains(&directions) {
        return Err(PyValueError::new_err("need n >= 1 and 1 to 6 directions"));
    }
    let (bundle, _) = planted_bundle(&PlantedSpec {
        n,
        directions,
        seed,
        ..Default::default()
    });
    let path = tensor_store::write_bundle(out_dir, &bundle).map_err(py_err)?;
    Ok(path.display().to_string())
}

/// Pixel box of output position `(u, v)` for `layers = [(kernel, stride, padding), ...]`.
#[pyfunction]
fn receptive_field(layers: Vec<(usize, usize, usize)>, input_hw: (usize, usize), u: usize, v: usize) -> PyResult<Bounds> {
    let arch = ArchSpec {
        input_hw: [input_hw.0, input_hw.1],
        layers: layers.into_iter().map(|(k, s, p)| LayerGeom::new(k, s, p)).collect(),
    };
    let fields = ReceptiveFields::new(&arch).map_err(py_err)?;
    fields.rect(u, v).map(bounds).map_err(py_err)
}

/// Exact Shapley values of a game given as a `2^m` table (bit `j` = player `j`).
#[pyfunction]
fn shapley_exact(table: Vec<f64>) -> PyResult<Vec<f64>> {
    concept_shap::shapley_exact_table(&table).map_err(py_err)
}

/// Monte Carlo Shapley values and their standard errors.
#[pyfunction]
#[pyo3(signature = (table, samples = 4096, seed = 0))]
fn shapley_mc(table: Vec<f64>, samples: usize, seed: u64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let m = table.len().trailing_zeros() as usize;
    if table.len() != 1 << m {
        return Err(PyValueError::new_err("table length must be a power of two"));
    }
    let eta = |active: &[bool]| {
        let mask = active.iter().enumerate().fold(0usize, |acc, (j, &on)| acc | (on as usize) << j);
        table[mask]
    };
    let est = concept_shap::shapley_mc(m, samples, seed, eta).map_err(py_err)?;
    Ok((est.values, est.stderr))
}

/// SoftWPMI score per text from cosine rows of the relevant and background images.
#[pyfunction]
#[pyo3(signature = (relevant, weights, background, lambda_ = 1.0, temperature_a = 100.0))]
fn soft_wpmi(
    relevant: Vec<Vec<f64>>,
    weights: Vec<f64>,
    background: Vec<Vec<f64>>,
    lambda_: f64,
    temperature_a: f64,
) -> PyResult<Vec<f64>> {
    let params = WpmiParams {
        lambda: lambda_,
        temperature_a,
        ..WpmiParams::default()
    };
    text_matcher::soft_wpmi(
        &matrix(relevant, "relevant")?,
        &weights,
        &matrix(background, "background")?,
        &params,
    )
    .map_err(py_err)
}

/// The `k` best `(index, text, score)` triples, ties to the smaller index.
#[pyfunction]
fn top_k(scores: Vec<f64>, texts: Vec<String>, k: usize) -> PyResult<Vec<(usize, String, f64)>> {
    let ranked = text_matcher::top_k(&scores, &texts, k).map_err(py_err)?;
    Ok(ranked.into_iter().map(|t| (t.index, t.text, t.score)).collect())
}

/// Indices of the CAVs kept by deduplication at `threshold`.
#[pyfunction]
#[pyo3(signature = (cavs, threshold = 0.95))]
fn dedup(cavs: Vec<Vec<f64>>, threshold: f64) -> PyResult<Vec<usize>> {
    let dim = cavs.first().map_or(0, Vec::len);
    if cavs.iter().any(|r| r.len() != dim) {
        return Err(PyValueError::new_err("CAV rows differ in length"));
    }
    let raw: Vec<f64> = cavs.into_iter().flatten().collect();
    let set = CavSet::normalize(&raw, dim, CavOrigin::Imported, "").map_err(py_err)?;
    Ok(set.dedup(threshold).source_index().to_vec())
}

/// Runs the full pipeline for a config file and returns the report as a dict.
/// With `write=True` report.json and report.md go to the configured output
/// directory.
#[pyfunction]
#[pyo3(signature = (config, write = true))]
fn run(py: Python<'_>, config: PathBuf, write: bool) -> PyResult<Py<PyAny>> {
    let text = py
        .detach(|| -> cavlex_core::Result<String> {
            let cfg = RunConfig::load(&config)?;
            let report = pipeline::with_configured_threads(|| pipeline::run_pipeline(&cfg))??;
            if write {
                pipeline::emit_report(&report, cfg.output_path(), &[ReportFormat::Json, ReportFormat::Markdown])?;
            }
            pipeline::report_json(&report)
        })
        .map_err(py_err)?;
    let json = py.import("json")?;
    Ok(json.call_method1("loads", (text,))?.unbind())
}

#[pymodule]
fn cavlex(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}

/// Adds every class and function of the extension to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyBundle>()?;
    m.add_function(wrap_pyfunction!(load_bundle, m)?)?;
    m.add_function(wrap_pyfunction!(write_planted_bundle, m)?)?;
    m.add_function(wrap_pyfunction!(receptive_field, m)?)?;
    m.add_function(wrap_pyfunction!(shapley_exact, m)?)?;
    m.add_function(wrap_pyfunction!(shapley_mc, m)?)?;
    m.add_function(wrap_pyfunction!(soft_wpmi, m)?)?;
    m.add_function(wrap_pyfunction!(top_k, m)?)?;
    m.add_function(wrap_pyfunction!(dedup, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
