//! Python bindings for the core library.

use std::path::PathBuf;

use hybrid_enkf::dynamics::{propagate_window, ModelSpec, StateVector};
use hybrid_enkf::enkf::{analyze_with, Ensemble, EnsembleKind, ObsCovariance, ObservationModel};
use hybrid_enkf::fcnn::{self, FcnnConfig, FcnnModel};
use hybrid_enkf::numerics::Matrix;
use hybrid_enkf::pipeline::{self, EnsembleChoice, ExperimentConfig, TruthSettings};
use hybrid_enkf::Error;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

create_exception!(hybrid_enkf_py, HybridEnkfError, PyException);

fn err(e: Error) -> PyErr {
    match e {
        Error::Config { .. } | Error::Contract(_) | Error::ShapeMismatch(_) => PyValueError::new_err(e.to_string()),
        other => HybridEnkfError::new_err(other.to_string()),
    }
}

fn config_from(spec: &str) -> PyResult<ExperimentConfig> {
    match ExperimentConfig::preset(spec) {
        Some(c) => Ok(c),
        None => hybrid_enkf::cli::parse_config(spec).map_err(err),
    }
}

fn model_spec(system: &str, steps: usize, dt: Option<f64>) -> PyResult<ModelSpec> {
    let spec = match system {
        "lorenz63" => ModelSpec::lorenz63(steps),
        "lorenz96" => ModelSpec::lorenz96(steps),
        other => return Err(PyValueError::new_err(format!("unknown system `{other}`"))),
    };
    Ok(match dt {
        Some(dt) => spec.with_dt(dt),
        None => spec,
    })
}

fn covariance_source(name: &str) -> PyResult<ObsCovariance> {
    match name {
        "sampled" => Ok(ObsCovariance::Sampled),
        "known" => Ok(ObsCovariance::Known),
        other => Err(PyValueError::new_err(format!(
            "covariance must be `sampled` or `known`, got `{other}`"
        ))),
    }
}

/// Names of the built-in presets.
#[pyfunction]
fn presets() -> Vec<&'static str> {
    vec!["lorenz63-paper", "lorenz96-paper"]
}

/// Validated config as JSON; accepts a preset name or a JSON document.
#[pyfunction]
fn load_config(spec: &str) -> PyResult<String> {
    let c = config_from(spec)?;
    serde_json::to_string_pretty(&c).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Advance `state` by `steps` forward-Euler steps.
#[pyfunction]
#[pyo3(signature = (system, state, steps, dt=None))]
fn propagate(system: &str, state: Vec<f64>, steps: usize, dt: Option<f64>) -> PyResult<Vec<f64>> {
    let spec = model_spec(system, steps, dt)?;
    let out = propagate_window(&StateVector::new(state, 0), &spec).map_err(err)?;
    Ok(out.values)
}

/// Unbiased sample covariance of `members` (one list per member).
#[pyfunction]
fn covariance(members: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let s = Matrix::from_columns(&members).map_err(err)?;
    Ok(hybrid_enkf::numerics::covariance(&s).map_err(err)?.to_rows())
}

/// Stochastic EnKF analysis; returns the analysis members.
#[pyfunction]
#[pyo3(signature = (forecast, measurements, observed, state_dim, noise, covariance="sampled"))]
fn analyze(
    forecast: Vec<Vec<f64>>,
    measurements: Vec<Vec<f64>>,
    observed: Vec<usize>,
    state_dim: usize,
    noise: f64,
    covariance: &str,
) -> PyResult<Vec<Vec<f64>>> {
    let obs = ObservationModel::new(observed, noise, state_dim).map_err(err)?;
    let s_f = Ensemble::from_members(&forecast, EnsembleKind::Forecast, 0).map_err(err)?;
    let s_m = Ensemble::from_members(&measurements, EnsembleKind::Measurement, 0).map_err(err)?;
    let s_a = analyze_with(&s_f, &s_m, &obs, covariance_source(covariance)?).map_err(err)?;
    Ok(s_a.members.columns())
}

/// Truth trajectories for a config: one list of states per trajectory.
#[pyfunction]
#[pyo3(signature = (config, count=None, steps=None))]
fn truths(config: &str, count: Option<usize>, steps: Option<usize>) -> PyResult<Vec<Vec<Vec<f64>>>> {
    let c = config_from(config)?;
    let mut settings = TruthSettings::from(&c);
    settings.count = count.unwrap_or(settings.count);
    settings.steps = steps.unwrap_or(settings.steps);
    let spec = c.model_spec().map_err(err)?;
    let out = pipeline::generate_truths(&spec, &settings, c.seed).map_err(err)?;
    Ok(out
        .into_iter()
        .map(|t| t.states.into_iter().map(|s| s.values).collect())
        .collect())
}

/// Output means of a plain (`model=None`) or coupled run over trajectory `index`.
#[pyfunction]
#[pyo3(signature = (config, index, ensemble="small", model=None))]
fn run(config: &str, index: usize, ensemble: &str, model: Option<&Fcnn>) -> PyResult<Vec<Vec<f64>>> {
    let c = config_from(config)?;
    let choice = match ensemble {
        "small" => EnsembleChoice::Small,
        "large" => EnsembleChoice::Large,
        other => {
            return Err(PyValueError::new_err(format!(
                "ensemble must be `small` or `large`, got `{other}`"
            )))
        }
    };
    let mut settings = TruthSettings::from(&c);
    settings.count = index + 1;
    let spec = c.model_spec().map_err(err)?;
    let truths = pipeline::generate_truths(&spec, &settings, c.seed).map_err(err)?;
    let truth = &truths[index];
    let r = match model {
        None => pipeline::run_plain(&c, truth, choice),
        Some(net) if choice == EnsembleChoice::Small => pipeline::run_coupled(&c, &net.inner, truth),
        Some(_) => {
            return Err(PyValueError::new_err(
                "the correction applies to the small ensemble only",
            ))
        }
    };
    Ok(r.map_err(err)?.output_means())
}

/// ε(t_j) between two sets of mean series, indexed `[trajectory][step][component]`.
#[pyfunction]
fn epsilon(small: Vec<Vec<Vec<f64>>>, large: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<f64>> {
    pipeline::epsilon_metric(&small, &large).map_err(err)
}

/// Network input for ensemble members, observation mean and previous mean.
#[pyfunction]
fn build_input(members: Vec<Vec<f64>>, obs_mean: Vec<f64>, prev_mean: Vec<f64>) -> PyResult<Vec<f64>> {
    fcnn::build_input_vector(&members, &obs_mean, &prev_mean).map_err(err)
}

/// Correction network.
#[pyclass(module = "hybrid_enkf_py", frozen)]
struct Fcnn {
    inner: FcnnModel,
}

#[pymethods]
impl Fcnn {
    /// He-initialized network with the given layer sizes.
    #[new]
    #[pyo3(signature = (layer_sizes, seed=0))]
    fn new(layer_sizes: Vec<usize>, seed: u64) -> PyResult<Self> {
        let inner = FcnnModel::initialize(FcnnConfig::new(layer_sizes, seed)).map_err(err)?;
        Ok(Fcnn { inner })
    }

    #[staticmethod]
    fn zeros(layer_sizes: Vec<usize>) -> PyResult<Self> {
        let inner = FcnnModel::zeros(FcnnConfig::new(layer_sizes, 0)).map_err(err)?;
        Ok(Fcnn { inner })
    }

    /// Network shaped for a config's input layout.
    #[staticmethod]
    fn for_config(config: &str) -> PyResult<Self> {
        let c = config_from(config)?;
        let inner = FcnnModel::initialize(c.fcnn_config().map_err(err)?).map_err(err)?;
        Ok(Fcnn { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Fcnn {
            inner: fcnn::load_model(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        fcnn::save_model(&self.inner, &path).map_err(err)
    }

    fn forward(&self, input: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.forward(&input).map_err(err)
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.inner.input_size()
    }

    #[getter]
    fn output_size(&self) -> usize {
        self.inner.output_size()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    #[getter]
    fn layer_sizes(&self) -> Vec<usize> {
        self.inner.config.layer_sizes.clone()
    }

    fn __repr__(&self) -> String {
        format!("Fcnn(layer_sizes={:?})", self.inner.config.layer_sizes)
    }
}

#[pymodule]
fn hybrid_enkf_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("HybridEnkfError", m.py().get_type::<HybridEnkfError>())?;
    m.add_class::<Fcnn>()?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(load_config, m)?)?;
    m.add_function(wrap_pyfunction!(propagate, m)?)?;
    m.add_function(wrap_pyfunction!(covariance, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(truths, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(epsilon, m)?)?;
    m.add_function(wrap_pyfunction!(build_input, m)?)?;
    Ok(())
}
