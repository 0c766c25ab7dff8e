//! Python bindings. Structured results (reports, statistics) come back as
//! plain dicts decoded from their JSON form.

use decisionnce_core::autodiff::DenseArray;
use decisionnce_core::encoders::Instruction;
use decisionnce_core::lcbc::{evaluate_bc_all, mean_success, train_bc, BcConfig};
use decisionnce_core::objectives::{self, Variant};
use decisionnce_core::planner::{evaluate_planner, PlannerConfig, PlannerPolicy, Warmstart};
use decisionnce_core::reward::{self, RewardForm};
use decisionnce_core::rng::{derive_rng, derive_seed};
use decisionnce_core::sampler;
use decisionnce_core::trainer::{self, TrainConfig};
use decisionnce_core::world::{self, WorldConfig};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIOError};
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(decisionnce, DecisionNceError, PyException);

fn err(e: decisionnce_core::Error) -> PyErr {
    match e {
        decisionnce_core::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => DecisionNceError::new_err(other.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| DecisionNceError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn world_config(config_json: Option<&str>) -> PyResult<WorldConfig> {
    match config_json {
        None => Ok(WorldConfig::default()),
        Some(text) => serde_json::from_str(text).map_err(|e| DecisionNceError::new_err(format!("invalid world config: {e}"))),
    }
}

fn parse_instruction(config: &WorldConfig, text: &str) -> PyResult<Instruction> {
    config.vocab().parse(text).map_err(err)
}

/// A synthetic world of paired forward/mirror tasks.
#[pyclass(module = "decisionnce", frozen)]
struct World {
    inner: world::World,
}

#[pymethods]
impl World {
    /// `config_json` holds any subset of the world settings.
    #[new]
    #[pyo3(signature = (config_json=None))]
    fn new(config_json: Option<&str>) -> PyResult<Self> {
        Ok(Self {
            inner: world::World::new(world_config(config_json)?).map_err(err)?,
        })
    }

    #[getter]
    fn d_obs(&self) -> usize {
        self.inner.config().d_obs
    }

    #[getter]
    fn d_act(&self) -> usize {
        self.inner.config().d_act
    }

    fn config_json(&self) -> String {
        serde_json::to_string(self.inner.config()).expect("world config serializes")
    }

    fn instructions(&self) -> Vec<String> {
        let vocab = self.inner.vocab();
        vocab.instructions().into_iter().map(|l| vocab.describe(l)).collect()
    }

    fn generate_dataset(&self, n: usize, seed: u64) -> PyResult<Dataset> {
        Ok(Dataset {
            inner: self.inner.generate_dataset(n, seed).map_err(err)?,
        })
    }

    fn generate_demos(&self, per_task: usize, seed: u64) -> PyResult<Dataset> {
        Ok(Dataset {
            inner: self.inner.generate_demos(per_task, seed).map_err(err)?,
        })
    }
}

#[pyclass(module = "decisionnce", frozen)]
struct Dataset {
    inner: world::Dataset,
}

impl Dataset {
    fn trajectory(&self, i: usize) -> PyResult<&world::Trajectory> {
        self.inner
            .trajectories
            .get(i)
            .ok_or_else(|| DecisionNceError::new_err(format!("no trajectory {i} in a dataset of {}", self.inner.len())))
    }
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: world::Dataset::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn world(&self) -> PyResult<World> {
        Ok(World {
            inner: world::World::new(self.inner.world.clone()).map_err(err)?,
        })
    }

    /// Observations of trajectory `i`, one list per frame.
    fn observations(&self, i: usize) -> PyResult<Vec<Vec<f64>>> {
        let t = self.trajectory(i)?;
        Ok((0..t.len()).map(|f| t.observation(f).to_vec()).collect())
    }

    fn instruction(&self, i: usize) -> PyResult<String> {
        Ok(self.inner.world.vocab().describe(self.trajectory(i)?.instruction()))
    }
}

/// Trained (or initial) encoders with the configuration that produced them.
#[pyclass(module = "decisionnce", frozen)]
struct Checkpoint {
    inner: trainer::Checkpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: trainer::load_checkpoint(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        trainer::save_checkpoint(&self.inner, path).map_err(err)
    }

    #[getter]
    fn objective(&self) -> &'static str {
        self.inner.config.objective.variant.name()
    }

    #[getter]
    fn iteration(&self) -> usize {
        self.inner.iteration
    }

    /// Per-iteration `(loss, grad_norm)`.
    fn metrics(&self) -> Vec<(f64, f64)> {
        self.inner.metrics.iter().map(|m| (m.loss, m.grad_norm)).collect()
    }

    fn config_json(&self) -> String {
        serde_json::to_string(&self.inner.config).expect("train config serializes")
    }

    fn encode_observation(&self, obs: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.params.encode_observation(&obs).map_err(err)
    }

    fn encode_instruction(&self, instruction: &str) -> PyResult<Vec<f64>> {
        let l = self.inner.params.config.vocab.parse(instruction).map_err(err)?;
        self.inner.params.encode_instruction(l).map_err(err)
    }

    /// The same run's encoders before any update.
    fn initial(&self) -> PyResult<Self> {
        let mut inner = self.inner.clone();
        inner.params = trainer::initial_params(&self.inner.config).map_err(err)?;
        inner.iteration = 0;
        inner.metrics.clear();
        Ok(Self { inner })
    }
}

#[pyfunction]
#[pyo3(signature = (dataset, objective="T", iterations=2000, batch_size=64, learning_rate=1e-3, weight_decay=0.0, temperature=1.0, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    dataset: &Dataset,
    objective: &str,
    iterations: usize,
    batch_size: usize,
    learning_rate: f64,
    weight_decay: f64,
    temperature: f64,
    seed: u64,
) -> PyResult<Checkpoint> {
    let mut config = TrainConfig::for_variant(Variant::parse(objective).map_err(err)?);
    config.iterations = iterations;
    config.batch_size = batch_size;
    config.learning_rate = learning_rate;
    config.weight_decay = weight_decay;
    config.objective.temperature = temperature;
    config.seed = seed;
    config.encoder.d_obs = dataset.inner.world.d_obs;
    config.encoder.vocab = dataset.inner.world.vocab();
    let data = &dataset.inner;
    let inner = py.detach(|| trainer::train(&config, data)).map_err(err)?;
    Ok(Checkpoint { inner })
}

#[pyfunction]
fn goal_probability(h: usize, t: usize) -> PyResult<f64> {
    sampler::goal_probability(h, t).map_err(err)
}

/// Simulated goal-frame statistics: frequencies, analytic values and the
/// chi-square test.
#[pyfunction]
#[pyo3(signature = (h, samples=1_000_000, seed=0))]
fn goal_statistics<'py>(py: Python<'py>, h: usize, samples: u64, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let hist = py
        .detach(|| sampler::empirical_goal_histogram(h, samples, &mut derive_rng(seed, 0)))
        .map_err(err)?;
    #[derive(Serialize)]
    struct Stats {
        analytic: Vec<f64>,
        empirical: Vec<f64>,
        no_goal: f64,
        max_abs_deviation: f64,
        chi_square: sampler::ChiSquareTest,
    }
    to_py(
        py,
        &Stats {
            analytic: hist.analytic(),
            empirical: hist.frequencies(),
            no_goal: hist.no_goal_frequency(),
            max_abs_deviation: hist.max_abs_deviation(),
            chi_square: hist.chi_square(),
        },
    )
}

#[pyfunction]
fn bt_probability(reward_pos: f64, reward_neg: f64) -> f64 {
    objectives::bt_probability(reward_pos, reward_neg)
}

#[pyfunction]
fn segment_reward_potential(phi_start: Vec<f64>, phi_goal: Vec<f64>, psi: Vec<f64>) -> PyResult<f64> {
    objectives::segment_reward_potential(&phi_start, &phi_goal, &psi).map_err(err)
}

#[pyfunction]
fn segment_reward_transition(phi_start: Vec<f64>, phi_goal: Vec<f64>, psi: Vec<f64>) -> PyResult<f64> {
    objectives::segment_reward_transition(&phi_start, &phi_goal, &psi).map_err(err)
}

/// Symmetric InfoNCE loss of a square logit matrix.
#[pyfunction]
#[pyo3(signature = (logits, temperature=1.0))]
fn contrastive_loss(logits: Vec<Vec<f64>>, temperature: f64) -> PyResult<f64> {
    let b = logits.len();
    if logits.iter().any(|r| r.len() != b) {
        return Err(DecisionNceError::new_err("logits must be a square matrix"));
    }
    let m = DenseArray::matrix(b, b, logits.concat()).map_err(err)?;
    objectives::contrastive_loss(&m, temperature).map_err(err)
}

/// Per-frame similarity of trajectory `index` to `instruction` (default:
/// the trajectory's own).
#[pyfunction]
#[pyo3(signature = (checkpoint, dataset, index, instruction=None))]
fn reward_curve<'py>(
    py: Python<'py>,
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    index: usize,
    instruction: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    reward::check_compatible(&checkpoint.inner.params, &dataset.inner.world).map_err(err)?;
    let traj = dataset.trajectory(index)?;
    let l = match instruction {
        Some(text) => parse_instruction(&dataset.inner.world, text)?,
        None => traj.instruction(),
    };
    let curve = reward::reward_curve(&checkpoint.inner.params, traj, l).map_err(err)?;
    let out = to_py(py, &curve)?;
    out.set_item("spearman", curve.spearman())?;
    Ok(out)
}

/// Segment-by-instruction reward grid plus its grounding statistics.
#[pyfunction]
#[pyo3(signature = (checkpoint, dataset, lengths=vec![2, 5, 10, 0], trajectories=40, seed=0))]
fn heatmap<'py>(
    py: Python<'py>,
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    lengths: Vec<usize>,
    trajectories: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let params = &checkpoint.inner.params;
    let data = &dataset.inner;
    reward::check_compatible(params, &data.world).map_err(err)?;
    let rows: Vec<usize> = (0..trajectories.min(data.len())).collect();
    let segments = reward::segments_of_lengths(data, &rows, &lengths, &mut derive_rng(seed, 0)).map_err(err)?;
    let form = RewardForm::for_variant(checkpoint.inner.config.objective.variant);
    let grid = reward::reward_heatmap(params, form, data, &segments, &data.world.vocab().instructions()).map_err(err)?;
    let out = to_py(py, &grid)?;
    out.set_item("diagonal_max_fraction", grid.diagonal_max_fraction())?;
    out.set_item("mirror_negative_fraction", grid.mirror_negative_fraction())?;
    Ok(out)
}

#[pyfunction]
#[pyo3(signature = (checkpoint, dataset, seed=0))]
fn first_image_stats<'py>(py: Python<'py>, checkpoint: &Checkpoint, dataset: &Dataset, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let params = &checkpoint.inner.params;
    reward::check_compatible(params, &dataset.inner.world).map_err(err)?;
    let stats = reward::first_image_similarity_stats(params, &dataset.inner).map_err(err)?;
    let mid = reward::mid_frame_pairwise_mean(params, &dataset.inner, &mut derive_rng(seed, 0)).map_err(err)?;
    let out = to_py(py, &stats)?;
    out.set_item("mid_frame_pairwise_mean", mid)?;
    Ok(out)
}

/// MPPI evaluation. `policy` is "embedding" (needs `checkpoint`), "oracle"
/// or "random"; `warmstart_gain` switches to the expert warmstart.
#[pyfunction]
#[pyo3(signature = (world, policy="embedding", checkpoint=None, instructions=None, episodes=50, seed=0, horizon=50, sequences=64, temperature=10.0, gamma=1.0, noise_scale=0.3, warmstart_gain=None))]
#[allow(clippy::too_many_arguments)]
fn evaluate_mppi<'py>(
    py: Python<'py>,
    world: &World,
    policy: &str,
    checkpoint: Option<&Checkpoint>,
    instructions: Option<Vec<String>>,
    episodes: usize,
    seed: u64,
    horizon: usize,
    sequences: usize,
    temperature: f64,
    gamma: f64,
    noise_scale: f64,
    warmstart_gain: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let config = PlannerConfig {
        horizon,
        sequences,
        temperature,
        gamma,
        noise_scale,
        warmstart: warmstart_gain.map_or(Warmstart::Zeros, |gain| Warmstart::Expert { gain }),
        ..PlannerConfig::default()
    };
    let instructions = match instructions {
        Some(texts) => texts
            .iter()
            .map(|t| parse_instruction(world.inner.config(), t))
            .collect::<PyResult<Vec<_>>>()?,
        None => world.inner.vocab().instructions(),
    };
    let policy = match (policy, checkpoint) {
        ("embedding", Some(c)) => {
            reward::check_compatible(&c.inner.params, world.inner.config()).map_err(err)?;
            PlannerPolicy::Embedding(&c.inner.params)
        }
        ("embedding", None) => return Err(DecisionNceError::new_err("the embedding policy needs a checkpoint")),
        ("oracle", _) => PlannerPolicy::Oracle,
        ("random", _) => PlannerPolicy::Random,
        (other, _) => return Err(DecisionNceError::new_err(format!("unknown policy {other:?}"))),
    };
    let w = &world.inner;
    let report = py
        .detach(|| evaluate_planner(policy, w, &instructions, episodes, &config, seed))
        .map_err(err)?;
    to_py(py, &report)
}

/// Trains a behaviour-cloning head on frozen features and returns
/// closed-loop success per instruction.
#[pyfunction]
#[pyo3(signature = (checkpoint, demos, steps=2000, episodes=25, seed=0, random_encoder=false))]
fn evaluate_lcbc<'py>(
    py: Python<'py>,
    checkpoint: &Checkpoint,
    demos: &Dataset,
    steps: usize,
    episodes: usize,
    seed: u64,
    random_encoder: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let ckpt = &checkpoint.inner;
    let data = &demos.inner;
    reward::check_compatible(&ckpt.params, &data.world).map_err(err)?;
    let config = BcConfig {
        steps,
        seed,
        ..BcConfig::default()
    };
    let evals = py
        .detach(|| -> decisionnce_core::Result<_> {
            let encoders = if random_encoder {
                trainer::initial_params(&ckpt.config)?
            } else {
                ckpt.params.clone()
            };
            let w = world::World::new(data.world.clone())?;
            let run = train_bc(&encoders, data, &config)?;
            evaluate_bc_all(&run.policy, &encoders, &w, episodes, derive_seed(seed, 1))
        })
        .map_err(err)?;
    let out = to_py(py, &evals)?;
    let result = pyo3::types::PyDict::new(py);
    result.set_item("per_instruction", out)?;
    result.set_item("success_rate", mean_success(&evals))?;
    Ok(result.into_any())
}

#[pymodule]
#[pyo3(name = "decisionnce")]
fn decisionnce_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DecisionNceError", m.py().get_type::<DecisionNceError>())?;
    m.add_class::<World>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Checkpoint>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(goal_probability, m)?)?;
    m.add_function(wrap_pyfunction!(goal_statistics, m)?)?;
    m.add_function(wrap_pyfunction!(bt_probability, m)?)?;
    m.add_function(wrap_pyfunction!(segment_reward_potential, m)?)?;
    m.add_function(wrap_pyfunction!(segment_reward_transition, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(reward_curve, m)?)?;
    m.add_function(wrap_pyfunction!(heatmap, m)?)?;
    m.add_function(wrap_pyfunction!(first_image_stats, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_mppi, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_lcbc, m)?)?;
    Ok(())
}
