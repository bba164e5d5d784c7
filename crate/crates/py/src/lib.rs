//! Python bindings. Matrices cross the boundary as lists of row lists.

use std::collections::BTreeMap;
use std::path::PathBuf;

use evctx_core::autograd::Tape;
use evctx_core::data::{read_features, Corpus};
use evctx_core::downstream::MetricsReport;
use evctx_core::gradcheck::run_suite;
use evctx_core::pretrain::{self, DistractorQueue};
use evctx_core::rng::rng_from_seed;
use evctx_core::runtime::{self, AblationAxis, RunConfig};
use evctx_core::Tensor;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(evctx, EvctxError, PyException, "Raised for every library error; the message starts with its code.");

fn err(e: evctx_core::Error) -> PyErr {
    EvctxError::new_err(format!("{}: {e}", e.code()))
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor<f64>> {
    Tensor::from_f64_rows(rows).map_err(err)
}

/// A validated run configuration built from a named preset.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (preset = "desk-scale"))]
    fn new(preset: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::preset(preset).map_err(err)?,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(err)
    }

    fn get(&self, key: &str) -> Option<String> {
        self.inner.get(key)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn hash(&self) -> u64 {
        self.inner.hash()
    }

    fn __repr__(&self) -> String {
        format!("Config(hash={:#018x})", self.inner.hash())
    }
}

/// Metrics record as `(task, n_samples, {name: value})`.
type Report = (String, usize, BTreeMap<String, f64>);

fn report(r: MetricsReport) -> Report {
    (r.task, r.n_samples, r.values)
}

/// A locked output directory that runs the pipeline stages.
#[pyclass(name = "Session")]
struct PySession {
    inner: runtime::Session,
}

#[pymethods]
impl PySession {
    #[new]
    fn new(config: PyConfig, out_dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: runtime::Session::open(config.inner, out_dir).map_err(err)?,
        })
    }

    /// Returns the number of training and held-out events.
    fn generate_data(&self, py: Python<'_>) -> PyResult<(usize, usize)> {
        let (train, eval) = py.detach(|| self.inner.generate_data()).map_err(err)?;
        Ok((train.n_events(), eval.n_events()))
    }

    fn pretrain_backbone(&self, py: Python<'_>) -> PyResult<()> {
        py.detach(|| self.inner.pretrain_backbone()).map(drop).map_err(err)
    }

    fn pretrain_txe(&self, py: Python<'_>) -> PyResult<()> {
        py.detach(|| self.inner.pretrain_txe()).map(drop).map_err(err)
    }

    fn probe(&self, py: Python<'_>) -> PyResult<Vec<Report>> {
        let rs = py.detach(|| self.inner.probe()).map_err(err)?;
        Ok(rs.into_iter().map(report).collect())
    }

    fn eval(&self, py: Python<'_>) -> PyResult<Vec<Report>> {
        let rs = py.detach(|| self.inner.eval()).map_err(err)?;
        Ok(rs.into_iter().map(report).collect())
    }

    /// Rows of `(label, retrieval@1, relation mean accuracy)`.
    fn ablate(&self, py: Python<'_>, axis: &str) -> PyResult<Vec<(String, f64, f64)>> {
        let axis = AblationAxis::parse(axis).map_err(err)?;
        let rows = py.detach(|| self.inner.ablate(axis)).map_err(err)?;
        Ok(rows.into_iter().map(|r| (r.label, r.retrieval_top1, r.relation_mean_acc)).collect())
    }

    #[getter]
    fn out_dir(&self) -> PathBuf {
        self.inner.out.root().to_path_buf()
    }
}

/// Summary of a feature file: counts and shapes only.
#[pyfunction]
fn inspect_features(path: PathBuf) -> PyResult<BTreeMap<&'static str, usize>> {
    let c: Corpus = read_features(path).map_err(err)?;
    Ok(BTreeMap::from([
        ("sequences", c.sequences.len()),
        ("events", c.n_events()),
        ("triplets", c.triplets.len()),
        ("d_in", c.d_in),
        ("window", c.window),
        ("stride_s", c.stride_s as usize),
    ]))
}

/// Draws a mask plan and returns `(size, start)` with a 1-based start.
#[pyfunction]
fn sample_mask(n: usize, alpha: f64, seed: u64) -> PyResult<(usize, usize)> {
    let p = pretrain::sample_mask_uniform(n, alpha, &mut rng_from_seed(seed)).map_err(err)?;
    Ok((p.size(), p.start()))
}

#[pyfunction]
fn max_mask_size(n: usize, alpha: f64) -> usize {
    pretrain::max_mask_size(n, alpha)
}

/// 1-based start of the length-`m` span with the largest summed discrepancy.
#[pyfunction]
fn max_discrepancy_start(discrepancies: Vec<f64>, m: usize) -> PyResult<usize> {
    pretrain::max_discrepancy_start(&discrepancies, m).map_err(err)
}

/// Masked-prediction loss for unit-norm predictions and targets against
/// an optional list of distractors.
#[pyfunction]
#[pyo3(signature = (predictions, targets, distractors, tau))]
fn mask_pred_loss(predictions: Vec<Vec<f64>>, targets: Vec<Vec<f64>>, distractors: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    let (vh, vt) = (matrix(&predictions)?, matrix(&targets)?);
    let mut queue = DistractorQueue::new(distractors.len().max(1), vh.cols());
    if !distractors.is_empty() {
        queue.push(&matrix(&distractors)?).map_err(err)?;
    }
    let mut tape = Tape::<f64>::new();
    let (a, b) = (tape.constant(vh), tape.constant(vt));
    let l = pretrain::mask_pred_loss(&mut tape, a, b, &queue, tau).map_err(err)?;
    Ok(tape.value(l).item())
}

/// Symmetric InfoNCE between two batches of unit-norm embeddings.
#[pyfunction]
fn info_nce(z_a: Vec<Vec<f64>>, z_b: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(matrix(&z_a)?);
    let b = tape.constant(matrix(&z_b)?);
    let l = pretrain::info_nce(&mut tape, a, b, tau).map_err(err)?;
    Ok(tape.value(l).item())
}

/// Finite-difference checks for one seed: `(name, rel_error, passed)` per entry.
#[pyfunction]
#[pyo3(signature = (seed = 0, step = 1e-3, tol = 1e-4))]
fn gradcheck(py: Python<'_>, seed: u64, step: f64, tol: f64) -> PyResult<Vec<(String, f64, bool)>> {
    let entries = py.detach(|| run_suite(seed, step, tol)).map_err(err)?;
    Ok(entries.into_iter().map(|e| (e.name, e.report.rel_error, e.report.passed)).collect())
}

#[pymodule]
fn evctx(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("EvctxError", m.py().get_type::<EvctxError>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PySession>()?;
    m.add_function(wrap_pyfunction!(inspect_features, m)?)?;
    m.add_function(wrap_pyfunction!(sample_mask, m)?)?;
    m.add_function(wrap_pyfunction!(max_mask_size, m)?)?;
    m.add_function(wrap_pyfunction!(max_discrepancy_start, m)?)?;
    m.add_function(wrap_pyfunction!(mask_pred_loss, m)?)?;
    m.add_function(wrap_pyfunction!(info_nce, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
