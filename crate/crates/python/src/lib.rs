//! Python bindings: datasets, teacher training, symbolic and tree students, metrics.

use std::path::PathBuf;

use distillforge::data::{self, Dataset};
use distillforge::dtree::{fit_xy, RegressionTree, TreeConfig};
use distillforge::harness::{self, load_dataset_spec, ExperimentConfig};
use distillforge::metrics;
use distillforge::symreg::{evolve, DistillationSet, ExprTree, GPConfig, GPResult};
use distillforge::teacher::{self, TeacherConfig, TeacherModel};
use distillforge::{Error, Matrix};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(distillforge_py, DistillforgeError, PyException);

fn py_err(e: impl Into<Error>) -> PyErr {
    let e: Error = e.into();
    DistillforgeError::new_err(e.to_string())
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(DistillforgeError::new_err("rows have different lengths"));
    }
    let n = rows.len();
    Ok(Matrix::from_vec(n, d, rows.into_iter().flatten().collect()))
}

fn from_matrix(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

#[pyclass(name = "Dataset", module = "distillforge_py")]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(name: String, feature_names: Vec<String>, x: Vec<Vec<f64>>, y: Vec<f64>) -> PyResult<Self> {
        let inner = Dataset::new(name, feature_names, to_matrix(x)?, y).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn feature_names(&self) -> Vec<String> {
        self.inner.feature_names.clone()
    }

    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        from_matrix(&self.inner.x)
    }

    #[getter]
    fn y(&self) -> Vec<f64> {
        self.inner.y.clone()
    }

    #[getter]
    fn n_samples(&self) -> usize {
        self.inner.n_samples()
    }

    #[getter]
    fn n_features(&self) -> usize {
        self.inner.n_features()
    }

    /// Returns (train_indices, test_indices).
    #[pyo3(signature = (test_fraction=0.2, seed=42))]
    fn split(&self, test_fraction: f64, seed: u64) -> PyResult<(Vec<usize>, Vec<usize>)> {
        let s = data::split(&self.inner, test_fraction, seed).map_err(py_err)?;
        Ok((s.train, s.test))
    }

    fn with_label_noise(&self, sigma: f64, seed: u64) -> PyResult<Self> {
        let inner = data::inject_label_noise(&self.inner, sigma, seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Returns (var_y, var_residuals, snr).
    fn snr(&self) -> PyResult<(f64, f64, f64)> {
        let r = data::snr_proxy(&self.inner).map_err(py_err)?;
        Ok((r.var_y, r.var_residuals, r.snr))
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset({:?}, n_samples={}, n_features={})",
            self.inner.name,
            self.inner.n_samples(),
            self.inner.n_features()
        )
    }
}

/// Loads a CSV path or a bundled dataset key.
#[pyfunction]
#[pyo3(signature = (dataset, data_dir="data", target=None, categorical=None))]
fn load_dataset(
    dataset: &str,
    data_dir: &str,
    target: Option<&str>,
    categorical: Option<Vec<String>>,
) -> PyResult<PyDataset> {
    let inner = load_dataset_spec(dataset, &PathBuf::from(data_dir), target, categorical.as_deref())
        .map_err(py_err)?;
    Ok(PyDataset { inner })
}

#[pyclass(name = "Teacher", module = "distillforge_py")]
struct PyTeacher {
    inner: TeacherModel,
    history: Vec<(f64, f64)>,
    wall_time: f64,
}

#[pymethods]
impl PyTeacher {
    fn forward(&self, x: Vec<f64>) -> PyResult<f64> {
        self.inner.forward(&x).map_err(py_err)
    }

    fn jacobian(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.jacobian(&x).map_err(py_err)
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        self.inner.predict_batch(&to_matrix(x)?).map_err(py_err)
    }

    fn jacobian_penalty(&self, x: Vec<Vec<f64>>) -> PyResult<f64> {
        self.inner.jacobian_penalty(&to_matrix(x)?).map_err(py_err)
    }

    fn total_loss(&self, x: Vec<Vec<f64>>, y: Vec<f64>, lam: f64) -> PyResult<f64> {
        self.inner.total_loss(&to_matrix(x)?, &y, lam).map_err(py_err)
    }

    /// Per-epoch (mse, penalty) pairs from training.
    #[getter]
    fn loss_history(&self) -> Vec<(f64, f64)> {
        self.history.clone()
    }

    #[getter]
    fn wall_time_seconds(&self) -> f64 {
        self.wall_time
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn hidden_width(&self) -> usize {
        self.inner.hidden_width()
    }

    #[getter]
    fn params(&self) -> Vec<f64> {
        self.inner.params().to_vec()
    }
}

/// Trains a teacher on standardized features `x` and raw targets `y`.
#[pyfunction]
#[pyo3(signature = (x, y, lam=0.0, seed=42, epochs=100, hidden_width=100, learning_rate=0.001, batch_size=128))]
#[allow(clippy::too_many_arguments)]
fn train_teacher(
    py: Python<'_>,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    lam: f64,
    seed: u64,
    epochs: usize,
    hidden_width: usize,
    learning_rate: f64,
    batch_size: usize,
) -> PyResult<PyTeacher> {
    let x = to_matrix(x)?;
    let cfg = TeacherConfig {
        hidden_width,
        learning_rate,
        epochs,
        batch_size,
        lambda: lam,
        seed,
        ..TeacherConfig::default()
    };
    let (model, stats) = py.detach(|| teacher::train(&x, &y, &cfg)).map_err(py_err)?;
    Ok(PyTeacher {
        inner: model,
        history: stats.loss_history.iter().map(|e| (e.mse, e.penalty)).collect(),
        wall_time: stats.wall_time_seconds,
    })
}

#[pyclass(name = "ExprTree", module = "distillforge_py")]
struct PyExprTree {
    inner: ExprTree,
}

#[pymethods]
impl PyExprTree {
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ExprTree::parse(text).map_err(py_err)?,
        })
    }

    fn eval(&self, x: Vec<f64>) -> PyResult<f64> {
        if let Some(v) = self.inner.max_var().filter(|v| *v >= x.len()) {
            return Err(DistillforgeError::new_err(format!(
                "formula uses X{v} but the row has {} values",
                x.len()
            )));
        }
        Ok(self.inner.eval(&x))
    }

    #[getter]
    fn node_count(&self) -> usize {
        self.inner.node_count()
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth()
    }

    fn __str__(&self) -> String {
        self.inner.format_prefix()
    }

    fn __repr__(&self) -> String {
        format!("ExprTree({:?})", self.inner.format_prefix())
    }

    fn __eq__(&self, other: PyRef<'_, PyExprTree>) -> bool {
        self.inner == other.inner
    }
}

#[pyclass(name = "GPResult", module = "distillforge_py")]
struct PyGPResult {
    inner: GPResult,
}

#[pymethods]
impl PyGPResult {
    #[getter]
    fn formula(&self) -> &str {
        &self.inner.formula
    }

    #[getter]
    fn tree(&self) -> PyExprTree {
        PyExprTree {
            inner: self.inner.best_tree.clone(),
        }
    }

    #[getter]
    fn raw_mse(&self) -> f64 {
        self.inner.raw_mse
    }

    #[getter]
    fn r2(&self) -> f64 {
        self.inner.r2_on_distillation_set
    }

    #[getter]
    fn generations_run(&self) -> usize {
        self.inner.generations_run
    }

    #[getter]
    fn history(&self) -> Vec<f64> {
        self.inner.best_fitness_history.clone()
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }
}

/// Evolves a symbolic student on (x, y_hat).
#[pyfunction]
#[pyo3(signature = (x, y_hat, population_size=500, generations=30, seed=42, parsimony_coefficient=0.001, stopping_threshold=0.01))]
fn symbolic_regression(
    py: Python<'_>,
    x: Vec<Vec<f64>>,
    y_hat: Vec<f64>,
    population_size: usize,
    generations: usize,
    seed: u64,
    parsimony_coefficient: f64,
    stopping_threshold: f64,
) -> PyResult<PyGPResult> {
    let ds = DistillationSet::new(to_matrix(x)?, y_hat).map_err(py_err)?;
    let cfg = GPConfig {
        population_size,
        generations,
        seed,
        parsimony_coefficient,
        stopping_threshold,
        ..GPConfig::default()
    };
    let inner = py.detach(|| evolve(&ds, &cfg)).map_err(py_err)?;
    Ok(PyGPResult { inner })
}

#[pyclass(name = "RegressionTree", module = "distillforge_py")]
struct PyRegressionTree {
    inner: RegressionTree,
}

#[pymethods]
impl PyRegressionTree {
    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        self.inner.predict(&to_matrix(x)?).map_err(py_err)
    }

    #[getter]
    fn leaf_count(&self) -> usize {
        self.inner.leaf_count()
    }

    fn to_json(&self) -> String {
        self.inner.to_json_value().to_string()
    }
}

#[pyfunction]
#[pyo3(signature = (x, y, max_leaves=32, min_samples_leaf=1))]
fn fit_tree(x: Vec<Vec<f64>>, y: Vec<f64>, max_leaves: usize, min_samples_leaf: usize) -> PyResult<PyRegressionTree> {
    let cfg = TreeConfig {
        max_leaves,
        min_samples_leaf,
        ..TreeConfig::default()
    };
    let inner = fit_xy(&to_matrix(x)?, &y, &cfg).map_err(py_err)?;
    Ok(PyRegressionTree { inner })
}

#[pyfunction]
fn r2(y_true: Vec<f64>, y_pred: Vec<f64>) -> PyResult<f64> {
    metrics::r2(&y_true, &y_pred).map_err(py_err)
}

#[pyfunction]
fn relative_improvement(base: f64, new: f64) -> PyResult<f64> {
    metrics::relative_improvement(base, new).map_err(py_err)
}

/// Runs the full teacher-then-symbolic-student pipeline and returns the score row as a dict.
///
/// `config` is TOML text in the experiment config format; defaults apply when omitted.
#[pyfunction]
#[pyo3(signature = (dataset, lam, seed=42, config=None))]
fn run_pipeline<'py>(
    py: Python<'py>,
    dataset: PyRef<'py, PyDataset>,
    lam: f64,
    seed: u64,
    config: Option<&str>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = match config {
        Some(t) => ExperimentConfig::from_toml_str(t).map_err(py_err)?,
        None => ExperimentConfig::default(),
    };
    let ds = dataset.inner.clone();
    let out = py
        .detach(|| harness::run_pipeline(&ds, lam, seed, &cfg))
        .map_err(py_err)?;
    let r = out.row;
    let d = PyDict::new(py);
    d.set_item("dataset", r.dataset)?;
    d.set_item("lambda", r.lambda)?;
    d.set_item("seed", r.seed)?;
    d.set_item("teacher_r2_train", r.teacher_r2_train)?;
    d.set_item("teacher_r2_test", r.teacher_r2_test)?;
    d.set_item("student_r2_test", r.student_r2_test)?;
    d.set_item("fidelity_r2", r.fidelity_r2)?;
    d.set_item("formula", r.formula)?;
    d.set_item("train_seconds", r.train_seconds)?;
    Ok(d)
}

#[pymodule]
pub fn distillforge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DistillforgeError", m.py().get_type::<DistillforgeError>())?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTeacher>()?;
    m.add_class::<PyExprTree>()?;
    m.add_class::<PyGPResult>()?;
    m.add_class::<PyRegressionTree>()?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train_teacher, m)?)?;
    m.add_function(wrap_pyfunction!(symbolic_regression, m)?)?;
    m.add_function(wrap_pyfunction!(fit_tree, m)?)?;
    m.add_function(wrap_pyfunction!(r2, m)?)?;
    m.add_function(wrap_pyfunction!(relative_improvement, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
