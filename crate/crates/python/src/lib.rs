//! Python bindings for the `dualebm` core crate.

use std::path::PathBuf;

use dualebm::dual::{DualConfig, DualTrainer, RestartMode, TrainerState};
use dualebm::metrics::{f1_norm, kl_estimate_tempered, sm_estimate};
use dualebm::mmd::{self, Kernel};
use dualebm::model::Scaled;
use dualebm::pde1d::{PdeConfig, PdeRecord, TorusSolver};
use dualebm::runner::{run_experiment, ExperimentConfig, RunOptions, RunSummary};
use dualebm::sampler::LangevinConfig;
use dualebm::sm::{sm_loss, SmConfig, SmTrainer};
use dualebm::{Activation, DataSet, FeatureMap, FeatureModel, Points, WeightInit};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn err(e: dualebm::Error) -> PyErr {
    match e {
        dualebm::Error::NonFinite { .. } | dualebm::Error::Io(_) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn points(rows: Vec<Vec<f64>>) -> PyResult<Points> {
    Points::from_rows(&rows).map_err(err)
}

fn rows(p: &Points) -> Vec<Vec<f64>> {
    p.to_rows()
}

fn activation(name: &str, sharpness: f64) -> PyResult<Activation> {
    match name {
        "relu" => Ok(Activation::Relu),
        "softplus" => Ok(Activation::Softplus { sharpness }),
        other => Err(PyValueError::new_err(format!("unknown activation {other:?}"))),
    }
}

/// Sample space: `sphere` (with intrinsic dimension `d`), `torus` or
/// `euclidean` (dimension `d`, Gaussian base).
#[pyclass(name = "Manifold", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyManifold(dualebm::Manifold);

#[pymethods]
impl PyManifold {
    #[staticmethod]
    fn sphere(d: usize) -> Self {
        PyManifold(dualebm::Manifold::sphere(d))
    }

    #[staticmethod]
    fn torus() -> Self {
        PyManifold(dualebm::Manifold::Torus)
    }

    #[staticmethod]
    fn euclidean(d: usize) -> Self {
        PyManifold(dualebm::Manifold::Euclidean { dim: d })
    }

    #[getter]
    fn ambient_dim(&self) -> usize {
        self.0.ambient_dim()
    }

    /// `n` draws from the base measure.
    fn sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Points::zeros(n, self.0.ambient_dim());
        for r in p.rows_mut() {
            self.0.sample_base(&mut rng, r);
        }
        rows(&p)
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.0)
    }
}

fn feature_map(manifold: dualebm::Manifold, features: &str, sharpness: f64, width: f64) -> PyResult<FeatureMap> {
    match features {
        "relu" => Ok(FeatureMap::relu()),
        "softplus" => Ok(FeatureMap::softplus(sharpness)),
        "periodic_gaussian" if manifold == dualebm::Manifold::Torus => Ok(FeatureMap::periodic_gaussian(width)),
        other => Err(PyValueError::new_err(format!("unknown features {other:?} for {manifold:?}"))),
    }
}

/// Student energy `(1/m) Σ σ_j w_j φ(x, θ_j)`.
#[pyclass(name = "FeatureEnsemble", from_py_object)]
#[derive(Clone)]
struct PyEnsemble(dualebm::FeatureEnsemble);

#[pymethods]
impl PyEnsemble {
    #[staticmethod]
    #[pyo3(signature = (manifold, m, seed, features = "relu", sharpness = 20.0, width = 0.2, ones = false))]
    fn random(manifold: PyManifold, m: usize, seed: u64, features: &str, sharpness: f64, width: f64, ones: bool) -> PyResult<Self> {
        let model = FeatureModel::new(manifold.0, feature_map(manifold.0, features, sharpness, width)?).map_err(err)?;
        let init = if ones { WeightInit::Ones } else { WeightInit::Uniform };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(PyEnsemble(dualebm::FeatureEnsemble::random(model, m, init, &mut rng).map_err(err)?))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn thetas(&self) -> Vec<Vec<f64>> {
        rows(&self.0.thetas)
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.0.weights.clone()
    }

    #[setter]
    fn set_weights(&mut self, w: Vec<f64>) -> PyResult<()> {
        if w.len() != self.0.len() || w.iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(PyValueError::new_err("weights must be nonnegative, one per neuron"));
        }
        self.0.weights = w;
        Ok(())
    }

    #[getter]
    fn signs(&self) -> Vec<i8> {
        self.0.signs.clone()
    }

    fn mean_weight(&self) -> f64 {
        self.0.mean_weight()
    }

    fn f1_norm(&self, beta: f64) -> f64 {
        f1_norm(&self.0, beta)
    }

    fn energy(&self, x: Vec<f64>) -> f64 {
        self.0.energy(&x)
    }

    fn energies(&self, xs: Vec<Vec<f64>>) -> Vec<f64> {
        xs.iter().map(|x| self.0.energy(x)).collect()
    }

    fn grad_energy(&self, x: Vec<f64>) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        self.0.grad_energy_x(&x, &mut g);
        g
    }

    /// Empirical score-matching loss on `data`.
    fn sm_loss(&self, data: Vec<Vec<f64>>, beta: f64) -> PyResult<f64> {
        Ok(sm_loss(&self.0, &DataSet::new(points(data)?).map_err(err)?, beta))
    }
}

/// Planted energy with two unit neurons `angle` radians apart.
#[pyclass(name = "TeacherModel", from_py_object)]
#[derive(Clone)]
struct PyTeacher(dualebm::TeacherModel);

#[pymethods]
impl PyTeacher {
    #[staticmethod]
    #[pyo3(signature = (d, angle, weight, activation_name = "relu", sharpness = 20.0))]
    fn two_neurons(d: usize, angle: f64, weight: f64, activation_name: &str, sharpness: f64) -> PyResult<Self> {
        let a = activation(activation_name, sharpness)?;
        Ok(PyTeacher(dualebm::TeacherModel::two_neurons(d, angle, weight, a).map_err(err)?))
    }

    #[getter]
    fn thetas(&self) -> Vec<Vec<f64>> {
        rows(&self.0.thetas)
    }

    fn energy(&self, x: Vec<f64>) -> f64 {
        self.0.energy(&x)
    }

    /// `n` Langevin draws from `exp(-beta f*)` on `S^d`.
    #[pyo3(signature = (n, beta, seed, burn_in = None, thin = None, chains = None, step = None))]
    #[allow(clippy::too_many_arguments)]
    fn sample(
        &self,
        n: usize,
        beta: f64,
        seed: u64,
        burn_in: Option<u64>,
        thin: Option<u64>,
        chains: Option<usize>,
        step: Option<f64>,
    ) -> PyResult<Vec<Vec<f64>>> {
        let mut lc = LangevinConfig::new(beta);
        lc.burn_in = burn_in.unwrap_or(lc.burn_in);
        lc.thin = thin.unwrap_or(lc.thin);
        lc.chains = chains.unwrap_or(lc.chains);
        lc.step = step.unwrap_or(lc.step);
        let manifold = dualebm::Manifold::sphere(self.0.dim() - 1);
        let data = dualebm::sampler::generate_dataset(&self.0, &manifold, n, &lc, seed).map_err(err)?;
        Ok(rows(data.points()))
    }
}

/// `(KL, standard error)` of `exp(-beta_teacher f*)` against the student law
/// `exp(-beta f)`, from teacher samples.
#[pyfunction]
#[pyo3(signature = (test, student, beta, teacher, beta_teacher = None))]
fn kl_estimate(test: Vec<Vec<f64>>, student: &PyEnsemble, beta: f64, teacher: &PyTeacher, beta_teacher: Option<f64>) -> PyResult<(f64, f64)> {
    let test = points(test)?;
    kl_estimate_tempered(&test, &Scaled(beta, &student.0), 1.0, &Scaled(beta_teacher.unwrap_or(beta), &teacher.0), 1.0).map_err(err)
}

/// Mean squared tangent score difference between `beta f` and `beta_teacher f*`.
#[pyfunction]
#[pyo3(signature = (test, student, beta, teacher, beta_teacher = None))]
fn sm_metric(test: Vec<Vec<f64>>, student: &PyEnsemble, beta: f64, teacher: &PyTeacher, beta_teacher: Option<f64>) -> PyResult<f64> {
    let test = points(test)?;
    let manifold = student.0.model.manifold;
    Ok(sm_estimate(&test, &Scaled(beta, &student.0), &Scaled(beta_teacher.unwrap_or(beta), &teacher.0), &manifold))
}

/// Squared MMD under the closed-form ReLU kernel on the sphere.
#[pyfunction]
fn mmd2(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    let (a, b) = (points(a)?, points(b)?);
    Ok(mmd::mmd2(&a, &b, &Kernel::ArcCosine1 { ambient: a.dim() }))
}

/// Simultaneous particle/neuron training.
#[pyclass(name = "DualTrainer")]
struct PyDualTrainer(DualTrainer);

#[pymethods]
impl PyDualTrainer {
    #[new]
    #[pyo3(signature = (ensemble, data, n_particles, alpha, s, beta, p_r = 0.0, seed = 0, stratified = false))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        ensemble: &PyEnsemble,
        data: Vec<Vec<f64>>,
        n_particles: usize,
        alpha: f64,
        s: f64,
        beta: f64,
        p_r: f64,
        seed: u64,
        stratified: bool,
    ) -> PyResult<Self> {
        let data = DataSet::new(points(data)?).map_err(err)?;
        let mut cfg = DualConfig::new(alpha, s, u64::MAX, beta);
        cfg.p_r = p_r;
        cfg.seed = seed;
        if stratified {
            cfg.restart_mode = RestartMode::Stratified;
        }
        let mut state = TrainerState::init(ensemble.0.model, ensemble.0.len(), n_particles, &data, &cfg).map_err(err)?;
        state.ensemble = ensemble.0.clone();
        Ok(PyDualTrainer(DualTrainer::new(cfg, data, state).map_err(err)?))
    }

    #[pyo3(signature = (steps = 1))]
    fn step(&mut self, py: Python<'_>, steps: u64) -> PyResult<()> {
        let t = &mut self.0;
        py.detach(|| (0..steps).try_for_each(|_| t.step())).map_err(err)
    }

    #[getter]
    fn iteration(&self) -> u64 {
        self.0.state.iteration
    }

    #[getter]
    fn time(&self) -> f64 {
        self.0.cfg.time(self.0.state.iteration)
    }

    #[getter]
    fn rescaled_time(&self) -> f64 {
        self.0.cfg.rescaled_time(self.0.state.iteration)
    }

    #[getter]
    fn ensemble(&self) -> PyEnsemble {
        PyEnsemble(self.0.state.ensemble.clone())
    }

    #[getter]
    fn particles(&self) -> Vec<Vec<f64>> {
        rows(&self.0.state.particles)
    }
}

/// Direct score-matching training.
#[pyclass(name = "SmTrainer")]
struct PySmTrainer(SmTrainer);

#[pymethods]
impl PySmTrainer {
    #[new]
    fn new(ensemble: &PyEnsemble, data: Vec<Vec<f64>>, s: f64, beta: f64) -> PyResult<Self> {
        let data = DataSet::new(points(data)?).map_err(err)?;
        Ok(PySmTrainer(SmTrainer::new(SmConfig::new(s, u64::MAX, beta), data, ensemble.0.clone()).map_err(err)?))
    }

    #[pyo3(signature = (steps = 1))]
    fn step(&mut self, py: Python<'_>, steps: u64) -> PyResult<()> {
        let t = &mut self.0;
        py.detach(|| (0..steps).try_for_each(|_| t.step())).map_err(err)
    }

    #[getter]
    fn iteration(&self) -> u64 {
        self.0.state.iteration
    }

    #[getter]
    fn ensemble(&self) -> PyEnsemble {
        PyEnsemble(self.0.state.ensemble.clone())
    }

    fn loss(&self) -> f64 {
        sm_loss(&self.0.state.ensemble, &self.0.data, self.0.cfg.beta)
    }
}

fn record<'py>(py: Python<'py>, r: &PdeRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("step", r.step)?;
    d.set_item("time", r.time)?;
    d.set_item("rescaled_time", r.rescaled_time)?;
    d.set_item("kl_ebm", r.kl_ebm)?;
    d.set_item("kl_nu", r.kl_nu)?;
    d.set_item("sm", r.sm)?;
    d.set_item("gamma_mass", r.gamma_mass)?;
    Ok(d)
}

/// Gridded solver of the torus dynamics.
#[pyclass(name = "TorusSolver")]
struct PyTorusSolver(TorusSolver);

#[pymethods]
impl PyTorusSolver {
    #[new]
    #[pyo3(signature = (alpha, total_time, alpha_prime = 0.0, beta = None, grid = None, dt = None))]
    fn new(alpha: f64, total_time: f64, alpha_prime: f64, beta: Option<f64>, grid: Option<usize>, dt: Option<f64>) -> PyResult<Self> {
        let mut cfg = PdeConfig::new(alpha, total_time);
        cfg.alpha_prime = alpha_prime;
        cfg.beta = beta.unwrap_or(cfg.beta);
        cfg.grid = grid.unwrap_or(cfg.grid);
        cfg.dt = dt.unwrap_or(cfg.dt);
        Ok(PyTorusSolver(TorusSolver::new(cfg).map_err(err)?))
    }

    #[pyo3(signature = (steps = 1))]
    fn step(&mut self, py: Python<'_>, steps: u64) -> PyResult<()> {
        let s = &mut self.0;
        py.detach(|| (0..steps).try_for_each(|_| s.step())).map_err(err)
    }

    /// Steps to the configured horizon.
    fn run(&mut self, py: Python<'_>) -> PyResult<()> {
        let s = &mut self.0;
        py.detach(|| {
            while s.steps < s.total_steps() {
                s.step()?;
            }
            Ok(())
        })
        .map_err(err)
    }

    #[getter]
    fn steps(&self) -> u64 {
        self.0.steps
    }

    #[getter]
    fn total_steps(&self) -> u64 {
        self.0.total_steps()
    }

    #[getter]
    fn x(&self) -> Vec<f64> {
        self.0.grid_points()
    }

    #[getter]
    fn nu(&self) -> Vec<f64> {
        self.0.fields.nu.clone()
    }

    #[getter]
    fn nu_p(&self) -> Vec<f64> {
        self.0.fields.nu_p.clone()
    }

    #[getter]
    fn gamma_minus(&self) -> Vec<f64> {
        self.0.fields.gamma_minus.clone()
    }

    fn energy(&self) -> Vec<f64> {
        self.0.energy()
    }

    fn record<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        record(py, &self.0.record().map_err(err)?)
    }
}

fn summary<'py>(py: Python<'py>, s: &RunSummary) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("out_dir", s.out_dir.display().to_string())?;
    d.set_item("metrics", s.metrics.as_ref().map(|m| m.display().to_string()))?;
    d.set_item("records", s.records)?;
    let children: Vec<Bound<'py, PyDict>> = s.children.iter().map(|c| summary(py, c)).collect::<PyResult<_>>()?;
    d.set_item("children", children)?;
    Ok(d)
}

/// Runs the experiment described by a TOML file, as the CLI does.
#[pyfunction]
#[pyo3(signature = (config, out = None, seed = None, log_every = None, resume = None, plot = false))]
fn run<'py>(
    py: Python<'py>,
    config: PathBuf,
    out: Option<PathBuf>,
    seed: Option<u64>,
    log_every: Option<u64>,
    resume: Option<PathBuf>,
    plot: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = ExperimentConfig::from_file(&config).map_err(err)?;
    let opts = RunOptions { out, seed, log_every, resume, plot };
    let s = py.detach(|| run_experiment(&cfg, &opts)).map_err(err)?;
    summary(py, &s)
}

#[pymodule]
fn pydualebm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyManifold>()?;
    m.add_class::<PyEnsemble>()?;
    m.add_class::<PyTeacher>()?;
    m.add_class::<PyDualTrainer>()?;
    m.add_class::<PySmTrainer>()?;
    m.add_class::<PyTorusSolver>()?;
    m.add_function(wrap_pyfunction!(kl_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(sm_metric, m)?)?;
    m.add_function(wrap_pyfunction!(mmd2, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
