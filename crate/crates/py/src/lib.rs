//! Python bindings for `appeal_core`.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use appeal_core::appealmap::{build_heatmap, window_positions, PatchGrid};
use appeal_core::cli::{dispatch, exit_code, EXIT_INVALID};
use appeal_core::domain::{generate_queries, load_domain_config, DomainConfig, Polarity, SearchQuery};
use appeal_core::error::AppealError;
use appeal_core::eval::{self, toy_harness as run_toy, ToyOptions};
use appeal_core::field::ScalarField;
use appeal_core::labeling::{self, RawScore};
use appeal_core::relevancy::area_test;
use appeal_core::synthesis;

create_exception!(appeal, PipelineError, PyException, "A pipeline stage or backend failed.");

fn to_py(err: AppealError) -> PyErr {
    if exit_code(&err) == EXIT_INVALID {
        PyValueError::new_err(err.to_string())
    } else {
        PipelineError::new_err(err.to_string())
    }
}

fn field(rows: Vec<Vec<f64>>) -> PyResult<ScalarField> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("expected a non-empty rectangular 2-D list"));
    }
    ScalarField::from_values(w, h, rows.concat()).map_err(to_py)
}

fn rows(f: &ScalarField) -> Vec<Vec<f64>> {
    f.values().chunks(f.width()).map(<[f64]>::to_vec).collect()
}

/// Correlation and error metrics between predictions and references.
#[pyclass(frozen, get_all, skip_from_py_object, module = "appeal")]
#[derive(Clone)]
struct MetricReport {
    plcc: f64,
    srcc: f64,
    krcc: f64,
    rmse: f64,
    mae: f64,
    n: usize,
}

#[pymethods]
impl MetricReport {
    fn __repr__(&self) -> String {
        format!(
            "MetricReport(plcc={:.4}, srcc={:.4}, krcc={:.4}, rmse={:.4}, mae={:.4}, n={})",
            self.plcc, self.srcc, self.krcc, self.rmse, self.mae, self.n
        )
    }
}

impl From<eval::MetricReport> for MetricReport {
    fn from(m: eval::MetricReport) -> Self {
        Self {
            plcc: m.plcc,
            srcc: m.srcc,
            krcc: m.krcc,
            rmse: m.rmse,
            mae: m.mae,
            n: m.n,
        }
    }
}

/// One image-search query.
#[pyclass(frozen, get_all, skip_from_py_object, module = "appeal")]
#[derive(Clone)]
struct Query {
    text: String,
    polarity: String,
    negative_group: Option<String>,
    adjective: String,
    noun: String,
}

#[pymethods]
impl Query {
    fn __repr__(&self) -> String {
        format!("Query({:?}, {})", self.text, self.polarity)
    }
}

impl From<SearchQuery> for Query {
    fn from(q: SearchQuery) -> Self {
        Self {
            polarity: match q.polarity {
                Polarity::Positive => "positive",
                Polarity::Negative => "negative",
            }
            .into(),
            text: q.text,
            negative_group: q.negative_group,
            adjective: q.adjective,
            noun: q.noun,
        }
    }
}

/// A validated domain configuration.
#[pyclass(frozen, module = "appeal")]
struct Domain(DomainConfig);

#[pymethods]
impl Domain {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        DomainConfig::from_toml_str(text).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_domain_config(&path).map(Self).map_err(to_py)
    }

    #[getter]
    fn name(&self) -> &str {
        &self.0.name
    }

    #[getter]
    fn nouns(&self) -> Vec<String> {
        self.0.nouns.clone()
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.0.gamma
    }

    #[getter]
    fn output_size(&self) -> u32 {
        self.0.output_size
    }

    #[getter]
    fn negative_groups(&self) -> Vec<String> {
        self.0.negative_groups.keys().cloned().collect()
    }

    fn queries(&self) -> Vec<Query> {
        generate_queries(&self.0).into_iter().map(Query::from).collect()
    }

    fn __repr__(&self) -> String {
        format!("Domain({:?}, {} nouns)", self.0.name, self.0.nouns.len())
    }
}

#[pyfunction]
fn correlations(pred: Vec<f64>, reference: Vec<f64>) -> PyResult<MetricReport> {
    eval::correlations(&pred, &reference).map(MetricReport::from).map_err(to_py)
}

/// Maps raw scores linearly onto [1, 10].
#[pyfunction]
fn scale_scores(raws: Vec<f64>) -> Vec<f64> {
    let raws: Vec<RawScore> = raws
        .into_iter()
        .enumerate()
        .map(|(i, raw)| RawScore {
            image_id: i.to_string(),
            raw,
        })
        .collect();
    labeling::scale_scores(&raws).into_iter().map(|l| l.scaled).collect()
}

#[pyfunction]
fn sample_alpha(k: u8, delta: f64) -> PyResult<f64> {
    synthesis::sample_alpha(k, delta).map_err(to_py)
}

#[pyfunction]
fn blend(positive: Vec<f64>, negative: Vec<f64>, alpha: f64) -> PyResult<Vec<f64>> {
    synthesis::blend(&positive, &negative, alpha).map_err(to_py)
}

/// Returns `(keep, fraction)` for a relevancy map given as rows.
#[pyfunction]
fn area_filter(relevancy: Vec<Vec<f64>>, gamma: f64) -> PyResult<(bool, f64)> {
    Ok(area_test(&field(relevancy)?, gamma))
}

/// Heatmap from a grid of window scores (rows x cols) over a
/// `width x height` image.
#[pyfunction]
fn heatmap(scores: Vec<Vec<f64>>, width: usize, height: usize, window: usize, stride: usize) -> PyResult<Vec<Vec<f64>>> {
    if window == 0 || stride == 0 || window > width || window > height {
        return Err(PyValueError::new_err("window must be positive and fit inside the image"));
    }
    let (xs, ys) = (window_positions(width, window, stride), window_positions(height, window, stride));
    if scores.len() != ys.len() || scores.iter().any(|r| r.len() != xs.len()) {
        return Err(PyValueError::new_err(format!("expected {} x {} scores", ys.len(), xs.len())));
    }
    let grid = PatchGrid {
        width,
        height,
        window,
        xs,
        ys,
        scores: scores.concat(),
    };
    build_heatmap(&grid).map(|f| rows(&f)).map_err(to_py)
}

/// Runs the synthetic end-to-end harness and returns its report as a dict.
#[pyfunction]
#[pyo3(signature = (seed=0, out_dir=None, negative_control=false))]
fn toy_harness(py: Python<'_>, seed: u64, out_dir: Option<PathBuf>, negative_control: bool) -> PyResult<Py<PyDict>> {
    let mut options = ToyOptions {
        out_dir,
        ..ToyOptions::default()
    };
    if negative_control {
        options = options.negative_control();
    }
    let report = py.detach(|| run_toy(seed, &options)).map_err(to_py)?;
    let text = serde_json::to_string(&report).map_err(|e| PipelineError::new_err(e.to_string()))?;
    let value = py.import("json")?.call_method1("loads", (text,))?;
    Ok(value.cast_into::<PyDict>()?.unbind())
}

/// Runs the command-line interface with `argv` (without the program name)
/// and returns its exit status.
#[pyfunction]
fn main(py: Python<'_>, argv: Vec<String>) -> i32 {
    py.detach(|| dispatch(std::iter::once("appeal".to_owned()).chain(argv)))
}

#[pymodule]
fn appeal(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PipelineError", m.py().get_type::<PipelineError>())?;
    m.add_class::<MetricReport>()?;
    m.add_class::<Query>()?;
    m.add_class::<Domain>()?;
    m.add_function(wrap_pyfunction!(correlations, m)?)?;
    m.add_function(wrap_pyfunction!(scale_scores, m)?)?;
    m.add_function(wrap_pyfunction!(sample_alpha, m)?)?;
    m.add_function(wrap_pyfunction!(blend, m)?)?;
    m.add_function(wrap_pyfunction!(area_filter, m)?)?;
    m.add_function(wrap_pyfunction!(heatmap, m)?)?;
    m.add_function(wrap_pyfunction!(toy_harness, m)?)?;
    m.add_function(wrap_pyfunction!(main, m)?)?;
    Ok(())
}
