//! Python bindings: models, the simulation study, evaluation metrics and
//! the staged pipeline.
//!
//! Configuration objects cross the boundary as TOML text, so Python code
//! uses the same schema as the command line.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use retlab::backtest;
use retlab::data::PanelDataset;
use retlab::eval;
use retlab::grad::Tensor;
use retlab::models::{Arch, Hyper, ModelHandle};
use retlab::pipeline::{self, exit_code, Pipeline, RunConfig, StageOutput};
use retlab::sim::{self, DgpSpec, StudyConfig};
use retlab::Error;

create_exception!(pyretlab, RetlabError, PyException, "Base class for retlab failures.");
create_exception!(pyretlab, ConfigError, RetlabError, "Invalid configuration (exit code 2).");
create_exception!(pyretlab, DataError, RetlabError, "Missing, malformed or inconsistent data (exit code 3).");
create_exception!(pyretlab, NumericError, RetlabError, "Non-finite values, divergence or a failed gradient check (exit code 4).");

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match exit_code(&e) {
        2 => ConfigError::new_err(msg),
        3 => DataError::new_err(msg),
        4 => NumericError::new_err(msg),
        _ => RetlabError::new_err(msg),
    }
}

fn from_toml<T: serde::de::DeserializeOwned>(text: &str) -> PyResult<T> {
    toml::from_str(text).map_err(|e| ConfigError::new_err(e.to_string()))
}

/// An initialized or trained network.
#[pyclass(name = "Model", module = "pyretlab", frozen)]
struct PyModel {
    inner: ModelHandle,
}

#[pymethods]
impl PyModel {
    /// `hyper` is an optional TOML table of architecture sizes.
    #[new]
    #[pyo3(signature = (arch, input_dim, seed = 0, hyper = None))]
    fn new(arch: &str, input_dim: usize, seed: u64, hyper: Option<&str>) -> PyResult<Self> {
        let arch: Arch = arch.parse().map_err(to_py)?;
        let hyper: Hyper = match hyper {
            Some(text) => from_toml(text)?,
            None => Hyper::default(),
        };
        let inner = ModelHandle::new(arch, Hyper { input_dim, ..hyper }, seed).map_err(to_py)?;
        Ok(PyModel { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: ModelHandle::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn arch(&self) -> &'static str {
        self.inner.arch.name()
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    /// Months per input window.
    #[getter]
    fn window(&self) -> usize {
        self.inner.window()
    }

    /// Forecasts for nested `[batch][window][dim]` inputs.
    fn predict(&self, inputs: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<f64>> {
        let x = windows_tensor(&inputs)?;
        self.inner.predict(&x).map_err(to_py)
    }

    /// Largest relative error between the analytic and central-difference
    /// gradient of the MSE on `(inputs, targets)`.
    #[pyo3(signature = (inputs, targets, eps = 1e-5))]
    fn grad_check(&self, inputs: Vec<Vec<Vec<f64>>>, targets: Vec<f64>, eps: f64) -> PyResult<f64> {
        let x = windows_tensor(&inputs)?;
        self.inner.grad_check(&x, &targets, eps).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Model({}, {} parameters)", self.inner.arch, self.inner.n_params())
    }
}

fn windows_tensor(inputs: &[Vec<Vec<f64>>]) -> PyResult<Tensor> {
    let b = inputs.len();
    let l = inputs.first().map_or(0, Vec::len);
    let d = inputs.first().and_then(|w| w.first()).map_or(0, Vec::len);
    let mut data = Vec::with_capacity(b * l * d);
    for w in inputs {
        if w.len() != l || w.iter().any(|row| row.len() != d) {
            return Err(DataError::new_err("inputs must be a rectangular [batch][window][dim] list"));
        }
        w.iter().for_each(|row| data.extend_from_slice(row));
    }
    Tensor::new(vec![b, l, d], data).map_err(to_py)
}

/// A simulated panel with its true conditional mean.
#[pyclass(name = "Panel", module = "pyretlab", frozen)]
struct PyPanel {
    inner: PanelDataset,
}

#[pymethods]
impl PyPanel {
    #[getter]
    fn n_assets(&self) -> usize {
        self.inner.n_assets()
    }

    #[getter]
    fn n_months(&self) -> usize {
        self.inner.n_months()
    }

    #[getter]
    fn n_observations(&self) -> usize {
        self.inner.n_observations()
    }

    /// Characteristics of an asset in a month, or None when absent.
    fn characteristics(&self, asset: usize, month: usize) -> Option<Vec<f64>> {
        self.inner.characteristics(asset, month).map(<[f64]>::to_vec)
    }

    fn oracle(&self, asset: usize, month: usize) -> Option<f64> {
        self.inner.oracle(asset, month)
    }

    /// Next-month return observed after `month`.
    fn target(&self, asset: usize, month: usize) -> Option<f64> {
        self.inner.target(asset, month)
    }

    #[pyo3(signature = (path, macro_path = None))]
    fn write_csv(&self, path: PathBuf, macro_path: Option<PathBuf>) -> PyResult<()> {
        self.inner.write_csv(&path).map_err(to_py)?;
        if let Some(m) = macro_path {
            self.inner.write_macro_csv(&m).map_err(to_py)?;
        }
        Ok(())
    }
}

/// Generates a panel from a TOML DGP description (defaults when omitted).
#[pyfunction]
#[pyo3(signature = (spec = None, seed = None))]
fn simulate(spec: Option<&str>, seed: Option<u64>) -> PyResult<PyPanel> {
    let mut spec: DgpSpec = match spec {
        Some(text) => from_toml(text)?,
        None => DgpSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    Ok(PyPanel {
        inner: sim::generate_panel(&spec).map_err(to_py)?,
    })
}

/// Population R² (%) of the DGP's conditional mean.
#[pyfunction]
#[pyo3(signature = (spec = None))]
fn oracle_r2(spec: Option<&str>) -> PyResult<f64> {
    let spec: DgpSpec = spec.map(from_toml).transpose()?.unwrap_or_default();
    sim::oracle_r2(&spec).map(|r| 100.0 * r).map_err(to_py)
}

/// Runs a Monte Carlo study described in TOML. Returns one dict per
/// (DGP, repetition, model) with in- and out-of-sample R² in percent.
#[pyfunction]
fn run_study<'py>(py: Python<'py>, config: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg: StudyConfig = from_toml(config)?;
    let result = py.detach(|| sim::run_simulation_study(&cfg)).map_err(to_py)?;
    result
        .reps
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("dgp", &r.dgp)?;
            d.set_item("model", &r.model)?;
            d.set_item("rep", r.rep)?;
            d.set_item("in_sample", r.in_sample)?;
            d.set_item("out_of_sample", r.out_of_sample)?;
            Ok(d)
        })
        .collect()
}

/// Out-of-sample R² (%) against a zero forecast.
#[pyfunction]
fn r2_oos(predicted: Vec<f64>, realized: Vec<f64>) -> PyResult<f64> {
    eval::r2_oos_values(&predicted, &realized).map_err(to_py)
}

/// Forecast-comparison statistic of a monthly loss-differential series
/// with Newey-West variance.
#[pyfunction]
#[pyo3(signature = (differentials, lag = eval::DEFAULT_DM_LAG))]
fn dm_statistic(differentials: Vec<f64>, lag: usize) -> PyResult<f64> {
    eval::dm_statistic(&differentials, lag).map_err(to_py)
}

/// Decile index (0 = lowest forecast) of each asset.
#[pyfunction]
fn sort_deciles(assets: Vec<String>, forecasts: Vec<f64>) -> PyResult<Vec<usize>> {
    if assets.len() != forecasts.len() {
        return Err(DataError::new_err("assets and forecasts differ in length"));
    }
    let pairs: Vec<(&str, f64)> = assets.iter().map(String::as_str).zip(forecasts).collect();
    backtest::sort_deciles(&pairs).map_err(to_py)
}

/// Mean forecast, mean, standard deviation (percent) and annualized
/// Sharpe ratio of a monthly portfolio.
#[pyfunction]
fn portfolio_stats<'py>(py: Python<'py>, predicted: Vec<f64>, realized: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let s = backtest::portfolio_stats(&predicted, &realized).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("pred", s.pred)?;
    d.set_item("avg", s.avg)?;
    d.set_item("std", s.std)?;
    d.set_item("sharpe", s.sharpe)?;
    Ok(d)
}

#[pyfunction]
fn sharpe_ratio(avg: f64, std: f64) -> Option<f64> {
    backtest::sharpe_ratio(avg, std)
}

/// Running sum of `log(1 + r)`, starting at zero.
#[pyfunction]
fn cumulative_log(returns: Vec<f64>) -> PyResult<Vec<f64>> {
    backtest::cumulative_log(&returns).map_err(to_py)
}

/// Gradient check of every architecture: `(arch, seed, max relative error)`.
#[pyfunction]
#[pyo3(signature = (seed = 0, seeds = 5))]
fn grad_check_all(py: Python<'_>, seed: u64, seeds: u64) -> PyResult<Vec<(String, u64, f64)>> {
    let rows = py.detach(|| pipeline::grad_check_all(seed, seeds)).map_err(to_py)?;
    Ok(rows.into_iter().map(|(a, s, e)| (a.name().to_string(), s, e)).collect())
}

/// A run directory driven by a TOML run configuration. Each stage method
/// returns the directory it wrote.
#[pyclass(name = "Pipeline", module = "pyretlab", frozen)]
struct PyPipeline {
    inner: Pipeline,
}

fn stage_dir(r: retlab::Result<StageOutput>) -> PyResult<PathBuf> {
    r.map(|o| o.dir).map_err(to_py)
}

#[pymethods]
impl PyPipeline {
    #[new]
    #[pyo3(signature = (config, out, seed = None))]
    fn new(config: &str, out: PathBuf, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg = RunConfig::from_toml(config).map_err(to_py)?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ok(PyPipeline {
            inner: Pipeline::new(cfg, out).map_err(to_py)?,
        })
    }

    #[getter]
    fn config_hash(&self) -> &str {
        self.inner.config_hash()
    }

    fn simulate(&self, py: Python<'_>) -> PyResult<PathBuf> {
        stage_dir(py.detach(|| self.inner.simulate()))
    }

    fn train(&self, py: Python<'_>) -> PyResult<PathBuf> {
        stage_dir(py.detach(|| self.inner.train()))
    }

    fn predict(&self, py: Python<'_>) -> PyResult<PathBuf> {
        stage_dir(py.detach(|| self.inner.predict()))
    }

    fn evaluate(&self, py: Python<'_>) -> PyResult<PathBuf> {
        stage_dir(py.detach(|| self.inner.evaluate()))
    }

    fn backtest(&self, py: Python<'_>) -> PyResult<PathBuf> {
        stage_dir(py.detach(|| self.inner.backtest()))
    }

    fn report(&self, py: Python<'_>) -> PyResult<PathBuf> {
        stage_dir(py.detach(|| self.inner.report()))
    }

    #[pyo3(signature = (seeds = 5, tolerance = 1e-4))]
    fn grad_check(&self, py: Python<'_>, seeds: u64, tolerance: f64) -> PyResult<PathBuf> {
        stage_dir(py.detach(|| self.inner.grad_check(seeds, tolerance)))
    }

    /// Runs simulate (when configured) through report.
    fn run_all(&self, py: Python<'_>) -> PyResult<PathBuf> {
        if self.inner.config.simulate.is_some() {
            self.simulate(py)?;
        }
        self.train(py)?;
        self.predict(py)?;
        self.evaluate(py)?;
        self.backtest(py)?;
        self.report(py)
    }
}

#[pymodule]
fn pyretlab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("RetlabError", py.get_type::<RetlabError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("DataError", py.get_type::<DataError>())?;
    m.add("NumericError", py.get_type::<NumericError>())?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyPanel>()?;
    m.add_class::<PyPipeline>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_r2, m)?)?;
    m.add_function(wrap_pyfunction!(run_study, m)?)?;
    m.add_function(wrap_pyfunction!(r2_oos, m)?)?;
    m.add_function(wrap_pyfunction!(dm_statistic, m)?)?;
    m.add_function(wrap_pyfunction!(sort_deciles, m)?)?;
    m.add_function(wrap_pyfunction!(portfolio_stats, m)?)?;
    m.add_function(wrap_pyfunction!(sharpe_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(cumulative_log, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check_all, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_windows_become_batch_window_dim() {
        let x = windows_tensor(&[vec![vec![1.0, 2.0], vec![3.0, 4.0]], vec![vec![5.0, 6.0], vec![7.0, 8.0]]]).unwrap();
        assert_eq!(x.shape(), &[2, 2, 2]);
        assert_eq!(x.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        assert!(windows_tensor(&[vec![vec![1.0]], vec![vec![1.0, 2.0]]]).is_err());
    }
}
