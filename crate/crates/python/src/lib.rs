//! Python bindings: environments, datasets, policies, training runs and
//! the statistics helpers.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use dsp_core::config::RunConfig;
use dsp_core::dataset::{self, PerturbConfig, Trajectory, DEMO_SEED_STRIDE};
use dsp_core::diffusion::NoiseSchedule;
use dsp_core::envs::{self, EnvState, TaskKind, TaskSpec};
use dsp_core::eval::{self, EvalConfig};
use dsp_core::policy::{DiffusionPolicy, PolicyParams};
use dsp_core::rng;
use dsp_core::run::{self, RunData};
use dsp_core::trainer::{self, ThresholdMode};
use dsp_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Numeric(_) => PyArithmeticError::new_err(e.to_string()),
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_task(name: &str) -> PyResult<TaskKind> {
    name.parse().map_err(py_err)
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A single episode of one task.
#[pyclass(module = "dsp_py")]
struct Env {
    spec: TaskSpec,
    state: EnvState,
}

#[pymethods]
impl Env {
    #[new]
    #[pyo3(signature = (task, seed=0))]
    fn new(task: &str, seed: u64) -> PyResult<Self> {
        let spec = TaskSpec::new(parse_task(task)?);
        let (state, _) = envs::reset(&spec, seed);
        Ok(Env { spec, state })
    }

    /// Restarts from `seed` and returns the first observation.
    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let (state, obs) = envs::reset(&self.spec, seed);
        self.state = state;
        obs
    }

    /// Applies one action; returns `(observation, done, success)`.
    fn step(&mut self, action: Vec<f64>) -> PyResult<(Vec<f64>, bool, bool)> {
        let out = envs::step(&self.spec, &self.state, &action).map_err(py_err)?;
        self.state = out.state;
        Ok((out.observation, out.done, out.success))
    }

    fn observation(&self) -> Vec<f64> {
        self.state.observation()
    }

    fn expert_action(&self) -> Vec<f64> {
        envs::scripted_expert(&self.spec, &self.state)
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        self.spec.obs_dim()
    }

    #[getter]
    fn action_dim(&self) -> usize {
        self.spec.action_dim
    }

    #[getter]
    fn step_count(&self) -> usize {
        self.state.step_count
    }
}

type Transitions = (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<bool>);

/// A list of trajectories.
#[pyclass(module = "dsp_py")]
struct Dataset {
    trajs: Vec<Trajectory>,
}

#[pymethods]
impl Dataset {
    /// Expert demonstrations for master seed `seed`.
    #[staticmethod]
    #[pyo3(signature = (task, n, seed=0))]
    fn generate(task: &str, n: usize, seed: u64) -> PyResult<Self> {
        let base = seed
            .checked_mul(DEMO_SEED_STRIDE)
            .ok_or_else(|| PyValueError::new_err("seed too large"))?;
        let trajs = dataset::generate_demos(parse_task(task)?, n, base).map_err(py_err)?;
        Ok(Dataset { trajs })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Dataset {
            trajs: dataset::load_dataset(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        dataset::save_dataset(&path, &self.trajs).map_err(py_err)
    }

    #[pyo3(signature = (seed=0, frac=0.2, eta=0.2, sigma_sq=0.05, flip_prob=0.5, closed_loop=true))]
    fn perturb(
        &self,
        seed: u64,
        frac: f64,
        eta: f64,
        sigma_sq: f64,
        flip_prob: f64,
        closed_loop: bool,
    ) -> PyResult<Self> {
        let config = PerturbConfig {
            frac,
            eta,
            sigma_sq,
            flip_prob,
            closed_loop,
        };
        Ok(Dataset {
            trajs: dataset::perturb_all(&self.trajs, &config, seed).map_err(py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.trajs.len()
    }

    fn successes(&self) -> usize {
        self.trajs.iter().filter(|t| t.success).count()
    }

    fn num_transitions(&self) -> usize {
        self.trajs.iter().map(Trajectory::len).sum()
    }

    fn num_perturbed(&self) -> usize {
        self.trajs.iter().map(Trajectory::num_perturbed).sum()
    }

    /// Flattened `(observations, actions, perturbed_mask)`.
    fn transitions(&self) -> PyResult<Transitions> {
        let mixed = dataset::mix(&self.trajs, &[]).map_err(py_err)?;
        let obs = mixed.observations.rows().into_iter().map(|r| r.to_vec()).collect();
        let actions = mixed.actions.rows().into_iter().map(|r| r.to_vec()).collect();
        Ok((obs, actions, mixed.is_perturbed.clone()))
    }

    fn to_jsonl(&self) -> String {
        dataset::to_jsonl(&self.trajs)
    }
}

/// Trained diffusion policy with its sampling schedule.
#[pyclass(module = "dsp_py")]
struct Policy {
    inner: DiffusionPolicy,
}

#[pymethods]
impl Policy {
    #[staticmethod]
    #[pyo3(signature = (path, beta_start=0.1, beta_end=0.9))]
    fn load(path: PathBuf, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        let params = PolicyParams::load(&path).map_err(py_err)?;
        let schedule = NoiseSchedule::vp_linear(params.diffusion_steps(), beta_start, beta_end).map_err(py_err)?;
        Ok(Policy {
            inner: DiffusionPolicy::new(params, schedule).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.params.save(&path).map_err(py_err)
    }

    /// One action for `obs` drawn with the stream of episode `seed`.
    #[pyo3(signature = (obs, seed=0))]
    fn sample(&self, obs: Vec<f64>, seed: u64) -> PyResult<Vec<f64>> {
        self.inner.sample(&obs, &mut envs::episode_rng(seed)).map_err(py_err)
    }

    /// Squared error between a sampled action and `action`.
    #[pyo3(signature = (obs, action, seed=0))]
    fn prediction_error(&self, obs: Vec<f64>, action: Vec<f64>, seed: u64) -> PyResult<f64> {
        let mut r = rng::stream(seed, rng::tag::FILTER, 0);
        trainer::predict_filter_error(&self.inner, &obs, &action, &mut r).map_err(py_err)
    }

    /// Rolls out on held-out seeds; returns the summary as JSON.
    #[pyo3(signature = (task, n_episodes=100, base_seed=eval::EVAL_SEED_BASE))]
    fn evaluate(&self, task: &str, n_episodes: usize, base_seed: u64) -> PyResult<String> {
        let config = EvalConfig {
            n_episodes,
            base_seed,
            ..EvalConfig::default()
        };
        let summary = eval::evaluate_policy(&self.inner, &TaskSpec::new(parse_task(task)?), &config).map_err(py_err)?;
        serde_json::to_string(&summary).map_err(json_err)
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        self.inner.params.obs_dim()
    }

    #[getter]
    fn action_dim(&self) -> usize {
        self.inner.params.act_dim()
    }
}

/// Runs both training stages from a TOML configuration plus
/// `section.key=value` overrides, writes the run directory and returns the
/// summary as JSON.
#[pyfunction]
#[pyo3(signature = (config, out_dir, overrides=Vec::new()))]
fn train(config: &str, out_dir: PathBuf, overrides: Vec<String>) -> PyResult<String> {
    let config = RunConfig::resolve(config, &overrides, None).map_err(py_err)?;
    let data = RunData::load(&config).map_err(py_err)?;
    let output = run::execute(&config, &data).map_err(py_err)?;
    run::write_run_dir(&out_dir, &config, &output).map_err(py_err)?;
    serde_json::to_string(&output.summary).map_err(json_err)
}

#[pyfunction]
fn iqm(values: Vec<f64>) -> PyResult<f64> {
    eval::iqm(&values).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (values, n_resamples=10_000, level=0.95, seed=0))]
fn bootstrap_ci(values: Vec<f64>, n_resamples: usize, level: f64, seed: u64) -> PyResult<(f64, f64)> {
    eval::bootstrap_ci(&values, n_resamples, level, seed).map_err(py_err)
}

/// Batch threshold for `mode` in {"mean", "mean_minus_std", "fixed:<v>"}.
#[pyfunction]
#[pyo3(signature = (deltas, mode="mean"))]
fn compute_threshold(deltas: Vec<f64>, mode: &str) -> PyResult<f64> {
    let mode: ThresholdMode = mode.parse().map_err(py_err)?;
    trainer::compute_threshold(&deltas, mode).map_err(py_err)
}

#[pyfunction]
fn task_names() -> Vec<&'static str> {
    TaskKind::ALL.iter().map(|t| t.name()).collect()
}

#[pymodule]
fn dsp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Env>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Policy>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(iqm, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap_ci, m)?)?;
    m.add_function(wrap_pyfunction!(compute_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(task_names, m)?)?;
    Ok(())
}
