//! MPPI planning on the synthetic world with language rewards.
//!
//! Rollouts run on a clone of the live episode, so every proposal sees the
//! same distractor walk the real episode will follow, and are rendered
//! without observation noise. The per-step reward is the change in
//! `S(φ(o), ψ(l))`; with `γ = 1` the return telescopes to the difference
//! between the last and first frame.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, DenseArray};
use crate::encoders::{EncoderParams, Instruction};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::world::{Env, World};

/// Initial mean of the proposal distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Warmstart {
    Zeros,
    /// The scripted expert's open-loop push along the task direction at a
    /// fixed per-step gain.
    Expert { gain: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub horizon: usize,
    pub sequences: usize,
    pub iterations: usize,
    /// Sharpness of the weighting: weights are `exp(temperature · R_norm)`.
    pub temperature: f64,
    pub gamma: f64,
    pub noise_scale: f64,
    pub warmstart: Warmstart,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            horizon: 50,
            sequences: 64,
            iterations: 1,
            temperature: 10.0,
            gamma: 1.0,
            noise_scale: 0.3,
            warmstart: Warmstart::Zeros,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.sequences < 2 || self.iterations == 0 {
            return Err(Error::InvalidArgument(format!(
                "planner needs horizon >= 1, sequences >= 2, iterations >= 1: {self:?}"
            )));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid temperature {}", self.temperature)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidArgument(format!("discount must lie in (0, 1], got {}", self.gamma)));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid noise scale {}", self.noise_scale)));
        }
        Ok(())
    }
}

/// Scores a rendered rollout.
#[derive(Clone, Debug)]
pub enum RewardModel<'a> {
    /// `S(φ(o_{t+1}), ψ) - S(φ(o_t), ψ)` under trained encoders.
    Embedding { params: &'a EncoderParams, psi: Vec<f64> },
    /// Ground-truth progression gain under the instruction.
    Oracle { instruction: Instruction },
}

impl<'a> RewardModel<'a> {
    pub fn embedding(params: &'a EncoderParams, l: Instruction) -> Result<Self> {
        Ok(RewardModel::Embedding {
            params,
            psi: params.encode_instruction(l)?,
        })
    }
}

fn actions_shape(actions: &DenseArray, d_act: usize) -> Result<usize> {
    match actions.dims2() {
        Some((h, d)) if d == d_act && h >= 1 => Ok(h),
        _ => Err(Error::ShapeMismatch {
            op: "rollout actions",
            left: vec![0, d_act],
            right: actions.shape().to_vec(),
        }),
    }
}

/// Discounted return of executing `actions` (`H x d_act`) from the
/// episode's current state, without touching the episode.
pub fn rollout_return(model: &RewardModel, env: &Env, actions: &DenseArray, gamma: f64) -> Result<f64> {
    let world = env.world();
    let h = actions_shape(actions, world.config().d_act)?;
    let mut sim = env.clone();
    let potentials: Vec<f64> = match model {
        RewardModel::Embedding { params, psi } => {
            let mut frames = Vec::with_capacity((h + 1) * world.config().d_obs);
            frames.extend(sim.observe_clean());
            for t in 0..h {
                sim.step(actions.row(t))?;
                frames.extend(sim.observe_clean());
            }
            let phi = params.encode_observations(&frames, h + 1)?;
            phi.chunks(psi.len()).map(|f| kernels::cosine(f, psi)).collect()
        }
        RewardModel::Oracle { instruction } => {
            let mut p = Vec::with_capacity(h + 1);
            p.push(world.progression(sim.state().task, sim.state().z, *instruction)?);
            for t in 0..h {
                let s = sim.step(actions.row(t))?;
                p.push(world.progression(s.task, s.z, *instruction)?);
            }
            p
        }
    };
    let mut ret = 0.0;
    let mut discount = 1.0;
    for w in potentials.windows(2) {
        ret += discount * (w[1] - w[0]);
        discount *= gamma;
    }
    Ok(ret)
}

/// `(R - mean) / max(std, 1e-8)` over the proposal set.
pub fn normalize_returns(returns: &[f64]) -> Vec<f64> {
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    returns.iter().map(|r| (r - mean) / std).collect()
}

/// Normalised weights `∝ exp(temperature · r)`, computed stably.
pub fn mppi_weights(normalized: &[f64], temperature: f64) -> Vec<f64> {
    let max = normalized.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = normalized.iter().map(|r| (temperature * (r - max)).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutScore {
    pub raw: f64,
    pub normalized: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub actions: DenseArray,
    /// Scores of the last iteration's proposals.
    pub scores: Vec<RolloutScore>,
    pub proposals: Vec<DenseArray>,
}

pub fn warmstart_actions(world: &World, task: usize, config: &PlannerConfig) -> DenseArray {
    let d = world.config().d_act;
    let row = match config.warmstart {
        Warmstart::Zeros => vec![0.0; d],
        Warmstart::Expert { gain } => world.expert_action(task, gain),
    };
    DenseArray::from_parts(vec![config.horizon, d], row.repeat(config.horizon))
}

/// Weighted average of proposals by their scores.
pub fn combine(proposals: &[DenseArray], weights: &[f64]) -> DenseArray {
    let mut out = vec![0.0; proposals[0].len()];
    for (p, &w) in proposals.iter().zip(weights) {
        for (o, v) in out.iter_mut().zip(p.values()) {
            *o += w * v;
        }
    }
    DenseArray::from_parts(proposals[0].shape().to_vec(), out)
}

fn propose<R: Rng + ?Sized>(mean: &DenseArray, scale: f64, rng: &mut R) -> DenseArray {
    let values = mean
        .values()
        .iter()
        .map(|m| m + scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    DenseArray::from_parts(mean.shape().to_vec(), values)
}

/// MPPI from the episode's current state. The env's own task picks the
/// expert warmstart direction.
pub fn plan<R: Rng + ?Sized>(model: &RewardModel, env: &Env, config: &PlannerConfig, rng: &mut R) -> Result<Plan> {
    config.validate()?;
    let mut mean = warmstart_actions(env.world(), env.state().task, config);
    let mut scores = Vec::new();
    let mut proposals = Vec::new();
    for _ in 0..config.iterations {
        proposals = (0..config.sequences)
            .map(|_| propose(&mean, config.noise_scale, rng))
            .collect();
        let raw = proposals
            .iter()
            .map(|p| rollout_return(model, env, p, config.gamma))
            .collect::<Result<Vec<_>>>()?;
        let normalized = normalize_returns(&raw);
        let weights = mppi_weights(&normalized, config.temperature);
        mean = combine(&proposals, &weights);
        scores = raw
            .into_iter()
            .zip(normalized)
            .map(|(raw, normalized)| RolloutScore { raw, normalized })
            .collect();
    }
    Ok(Plan {
        actions: mean,
        scores,
        proposals,
    })
}

/// How an evaluation episode picks its actions.
#[derive(Clone, Copy, Debug)]
pub enum PlannerPolicy<'a> {
    /// MPPI with the encoders' language reward.
    Embedding(&'a EncoderParams),
    /// MPPI with the ground-truth progression reward.
    Oracle,
    /// The warmstart plus one unscored proposal.
    Random,
}

impl PlannerPolicy<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            PlannerPolicy::Embedding(_) => "embedding",
            PlannerPolicy::Oracle => "oracle",
            PlannerPolicy::Random => "random",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionSuccess {
    pub instruction: String,
    pub episodes: usize,
    pub success_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerReport {
    pub policy: String,
    pub seed: u64,
    pub episodes: usize,
    pub success_rate: f64,
    pub per_instruction: Vec<InstructionSuccess>,
    pub config: PlannerConfig,
}

/// Runs `episodes` episodes cycling through `instructions`. Episode `e`
/// starts from a fresh reset with seed derived from `(seed, e)`, plans once
/// and executes the plan open-loop.
pub fn evaluate_planner(
    policy: PlannerPolicy,
    world: &World,
    instructions: &[Instruction],
    episodes: usize,
    config: &PlannerConfig,
    seed: u64,
) -> Result<PlannerReport> {
    config.validate()?;
    if episodes == 0 {
        return Err(Error::InvalidArgument("need at least one episode".into()));
    }
    if instructions.is_empty() {
        return Err(Error::EmptyInput { op: "evaluate_planner" });
    }
    let vocab = world.vocab();
    let mut hits = vec![0usize; instructions.len()];
    let mut counts = vec![0usize; instructions.len()];
    for e in 0..episodes {
        let k = e % instructions.len();
        let l = instructions[k];
        let task = vocab.task_of(l)?;
        let episode_seed = derive_seed(seed, e as u64);
        let mut env = Env::new(world, task, episode_seed);
        let mut rng = crate::rng::derive_rng(episode_seed, 1);
        let actions = match policy {
            PlannerPolicy::Embedding(params) => plan(&RewardModel::embedding(params, l)?, &env, config, &mut rng)?.actions,
            PlannerPolicy::Oracle => plan(&RewardModel::Oracle { instruction: l }, &env, config, &mut rng)?.actions,
            PlannerPolicy::Random => propose(&warmstart_actions(world, task, config), config.noise_scale, &mut rng),
        };
        for t in 0..config.horizon {
            env.step(actions.row(t))?;
        }
        counts[k] += 1;
        hits[k] += world.success(env.state(), l)? as usize;
    }
    let per_instruction = instructions
        .iter()
        .zip(hits.iter().zip(&counts))
        .map(|(&l, (&h, &n))| InstructionSuccess {
            instruction: vocab.describe(l),
            episodes: n,
            success_rate: if n == 0 { 0.0 } else { h as f64 / n as f64 },
        })
        .collect();
    Ok(PlannerReport {
        policy: policy.name().into(),
        seed,
        episodes,
        success_rate: hits.iter().sum::<usize>() as f64 / episodes as f64,
        per_instruction,
        config: config.clone(),
    })
}
