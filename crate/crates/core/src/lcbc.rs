//! Language-conditioned behavior cloning on frozen encoders.
//!
//! The policy sees `[φ(o_t), ψ(l), z_t]`, where `z_t` stands in for
//! proprioception, and regresses the demonstrated action with squared error.
//! Encoder features are computed once up front with plain forward passes, so
//! no gradient can reach the encoders.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DenseArray, Graph, MlpParams};
use crate::encoders::{EncoderParams, Instruction};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, derive_seed};
use crate::trainer::checkpoint::{read_tensor_file, write_tensor_file};
use crate::trainer::{Optimizer, OptimizerState};
use crate::world::{Dataset, Env, World};

const POLICY_MAGIC: &[u8; 8] = b"DNCEPLCY";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BcConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Steps between full-set loss evaluations and policy snapshots.
    pub log_interval: usize,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            learning_rate: 1e-4,
            batch_size: 16,
            steps: 2000,
            optimizer: Optimizer::default(),
            seed: 0,
            log_interval: 100,
        }
    }
}

impl BcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 || self.log_interval == 0 {
            return Err(Error::InvalidArgument(format!(
                "batch size, steps and log interval must be positive: {self:?}"
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid learning rate {}", self.learning_rate)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Policy head: `2K + 1` inputs, `d_act` outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub mlp: MlpParams,
}

impl PolicyParams {
    pub fn init<R: Rng + ?Sized>(embed_dim: usize, hidden: &[usize], d_act: usize, rng: &mut R) -> Result<Self> {
        let mut widths = vec![2 * embed_dim + 1];
        widths.extend_from_slice(hidden);
        widths.push(d_act);
        Ok(Self {
            mlp: MlpParams::init(widths, rng)?,
        })
    }

    pub fn input_width(&self) -> usize {
        self.mlp.input_width()
    }

    pub fn act(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_width() {
            return Err(Error::ShapeMismatch {
                op: "policy input",
                left: vec![self.input_width()],
                right: vec![input.len()],
            });
        }
        Ok(self.mlp.forward_rows(input, 1))
    }
}

/// `[φ(o), ψ(l), z]` for a single step.
pub fn policy_input(encoders: &EncoderParams, obs: &[f64], psi: &[f64], z: f64) -> Result<Vec<f64>> {
    let mut x = encoders.encode_observation(obs)?;
    x.extend_from_slice(psi);
    x.push(z);
    Ok(x)
}

/// Frozen inputs and action targets for every demonstrated step.
#[derive(Clone, Debug, PartialEq)]
pub struct BcData {
    pub inputs: DenseArray,
    pub targets: DenseArray,
}

impl BcData {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn rows(&self, idx: &[usize]) -> (DenseArray, DenseArray) {
        let pick = |a: &DenseArray| {
            let w = a.shape()[1];
            let mut v = Vec::with_capacity(idx.len() * w);
            for &i in idx {
                v.extend_from_slice(a.row(i));
            }
            DenseArray::from_parts(vec![idx.len(), w], v)
        };
        (pick(&self.inputs), pick(&self.targets))
    }
}

pub fn bc_data(encoders: &EncoderParams, demos: &Dataset) -> Result<BcData> {
    if demos.trajectories.is_empty() {
        return Err(Error::EmptyInput { op: "bc_data" });
    }
    let width = 2 * encoders.config.embed_dim + 1;
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut n = 0;
    let mut d_act = 0;
    for (i, traj) in demos.trajectories.iter().enumerate() {
        let actions = traj
            .actions()
            .ok_or_else(|| Error::MissingActions(format!("demo {i} ({})", demos.world.vocab().describe(traj.instruction()))))?;
        let z = traj
            .progression()
            .ok_or_else(|| Error::InvalidArgument(format!("demo {i} carries no progression")))?;
        let steps = traj.len() - 1;
        let phi = encoders.encode_observations(&traj.observations().values()[..steps * traj.obs_dim()], steps)?;
        let psi = encoders.encode_instruction(traj.instruction())?;
        for t in 0..steps {
            inputs.extend_from_slice(&phi[t * psi.len()..(t + 1) * psi.len()]);
            inputs.extend_from_slice(&psi);
            inputs.push(z[t]);
            targets.extend_from_slice(actions.row(t));
        }
        n += steps;
        d_act = actions.shape()[1];
    }
    Ok(BcData {
        inputs: DenseArray::matrix(n, width, inputs)?,
        targets: DenseArray::matrix(n, d_act, targets)?,
    })
}

/// Mean over samples of the summed squared action error.
pub fn bc_loss(policy: &PolicyParams, data: &BcData) -> f64 {
    let pred = policy.mlp.forward_rows(data.inputs.values(), data.len());
    let sq: f64 = pred.iter().zip(data.targets.values()).map(|(p, t)| (p - t).powi(2)).sum();
    sq / data.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BcRecord {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BcRun {
    pub policy: PolicyParams,
    /// Full-set loss at step 0 and every `log_interval` steps.
    pub history: Vec<BcRecord>,
    /// Policies at every logged step after 0, for max-over-training scores.
    pub snapshots: Vec<(usize, PolicyParams)>,
    /// Mean mini-batch loss of every completed pass over the shuffled data.
    pub epoch_losses: Vec<f64>,
}

pub fn train_bc_on(data: &BcData, d_embed: usize, config: &BcConfig) -> Result<BcRun> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput { op: "train_bc" });
    }
    let d_act = data.targets.shape()[1];
    let mut rng = derive_rng(config.seed, 0);
    let mut policy = PolicyParams::init(d_embed, &config.hidden, d_act, &mut rng)?;
    if policy.input_width() != data.inputs.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "train_bc",
            left: vec![policy.input_width()],
            right: vec![data.inputs.shape()[1]],
        });
    }
    let mut opt = OptimizerState::new(config.optimizer, &policy.mlp.tensors());
    let mut history = vec![BcRecord {
        step: 0,
        loss: bc_loss(&policy, data),
    }];
    let mut snapshots = Vec::new();
    let mut epoch_losses = Vec::new();
    let (mut epoch_sum, mut epoch_batches) = (0.0, 0usize);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    for step in 1..=config.steps {
        let mut idx = Vec::with_capacity(config.batch_size);
        while idx.len() < config.batch_size {
            if cursor == order.len() {
                if epoch_batches > 0 {
                    epoch_losses.push(epoch_sum / epoch_batches as f64);
                    (epoch_sum, epoch_batches) = (0.0, 0);
                }
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let (x, y) = data.rows(&idx);
        let mut g = Graph::new();
        let handle = policy.mlp.register(&mut g);
        let xi = g.leaf(x);
        let yi = g.leaf(y);
        let out = handle.forward(&mut g, xi)?;
        let diff = g.sub(out, yi)?;
        let sq = g.mul(diff, diff)?;
        let total = g.sum(sq);
        let loss = g.scale(total, 1.0 / config.batch_size as f64);
        if !g.value(loss).is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: step,
                batch_seed: config.seed,
            });
        }
        epoch_sum += g.value(loss).values()[0];
        epoch_batches += 1;
        let mut grads = g.backward(loss)?;
        let grads: Vec<DenseArray> = handle.nodes().into_iter().map(|n| grads.take(n)).collect();
        opt.update(&mut policy.mlp.tensors_mut(), &grads, config.learning_rate, 0.0)?;
        if step % config.log_interval == 0 || step == config.steps {
            history.push(BcRecord {
                step,
                loss: bc_loss(&policy, data),
            });
            snapshots.push((step, policy.clone()));
        }
    }
    Ok(BcRun {
        policy,
        history,
        snapshots,
        epoch_losses,
    })
}

/// Behavior cloning on `demos` with `encoders` frozen.
pub fn train_bc(encoders: &EncoderParams, demos: &Dataset, config: &BcConfig) -> Result<BcRun> {
    let data = bc_data(encoders, demos)?;
    train_bc_on(&data, encoders.config.embed_dim, config)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BcEvaluation {
    pub instruction: String,
    pub episodes: usize,
    pub success_rate: f64,
    pub seed: u64,
}

/// Closed-loop success of `act(observation, z)` on instruction `l` over
/// `episodes` fresh episodes of `h_max` steps each. Episode `e` uses the seed
/// derived from `(seed, e)`.
pub fn evaluate_closed_loop<F>(world: &World, l: Instruction, episodes: usize, seed: u64, mut act: F) -> Result<BcEvaluation>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    if episodes == 0 {
        return Err(Error::InvalidArgument("need at least one episode".into()));
    }
    let task = world.vocab().task_of(l)?;
    let mut hits = 0;
    for e in 0..episodes {
        let mut env = Env::new(world, task, derive_seed(seed, e as u64));
        for _ in 0..world.config().h_max {
            let obs = env.observe();
            let a = act(&obs, env.state().z)?;
            env.step(&a)?;
        }
        hits += world.success(env.state(), l)? as usize;
    }
    Ok(BcEvaluation {
        instruction: world.vocab().describe(l),
        episodes,
        success_rate: hits as f64 / episodes as f64,
        seed,
    })
}

pub fn evaluate_bc(
    policy: &PolicyParams,
    encoders: &EncoderParams,
    world: &World,
    l: Instruction,
    episodes: usize,
    seed: u64,
) -> Result<BcEvaluation> {
    let psi = encoders.encode_instruction(l)?;
    evaluate_closed_loop(world, l, episodes, seed, |obs, z| {
        policy.act(&policy_input(encoders, obs, &psi, z)?)
    })
}

/// Success averaged over every instruction, `episodes` each.
pub fn evaluate_bc_all(policy: &PolicyParams, encoders: &EncoderParams, world: &World, episodes: usize, seed: u64) -> Result<Vec<BcEvaluation>> {
    world
        .vocab()
        .instructions()
        .into_iter()
        .enumerate()
        .map(|(i, l)| evaluate_bc(policy, encoders, world, l, episodes, derive_seed(seed, i as u64)))
        .collect()
}

pub fn mean_success(evals: &[BcEvaluation]) -> f64 {
    evals.iter().map(|e| e.success_rate).sum::<f64>() / evals.len() as f64
}

#[derive(Serialize, Deserialize)]
struct PolicyMeta {
    widths: Vec<usize>,
    config: BcConfig,
    history: Vec<BcRecord>,
}

/// Stored in the encoder checkpoint container under its own magic.
pub fn write_policy(run: &BcRun, config: &BcConfig, out: impl Write) -> Result<()> {
    let meta = serde_json::to_vec(&PolicyMeta {
        widths: run.policy.mlp.widths().to_vec(),
        config: config.clone(),
        history: run.history.clone(),
    })?;
    write_tensor_file(POLICY_MAGIC, &meta, &run.policy.mlp.tensors(), out)
}

pub fn read_policy(input: impl Read) -> Result<(PolicyParams, BcConfig, Vec<BcRecord>)> {
    let (meta, tensors) = read_tensor_file(POLICY_MAGIC, input)?;
    let meta: PolicyMeta = serde_json::from_slice(&meta)?;
    let mlp = MlpParams::from_tensors(meta.widths, tensors)?;
    Ok((PolicyParams { mlp }, meta.config, meta.history))
}

pub fn save_policy(run: &BcRun, config: &BcConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_policy(run, config, BufWriter::new(file))
}

pub fn load_policy(path: impl AsRef<Path>) -> Result<(PolicyParams, BcConfig, Vec<BcRecord>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_policy(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{init_params, EncoderConfig};
    use crate::world::WorldConfig;

    fn setup() -> (World, EncoderParams) {
        let w = World::new(WorldConfig::default()).unwrap();
        (w, init_params(&EncoderConfig::default(), 3).unwrap())
    }

    #[test]
    fn constant_action_is_learned() {
        let (w, enc) = setup();
        let mut demos = w.generate_demos(1, 2).unwrap();
        for t in &mut demos.trajectories {
            let n = t.len() - 1;
            let acts = DenseArray::from_rows(&vec![[0.3, -0.6]; n]).unwrap();
            *t = crate::world::Trajectory::new(t.instruction(), t.observations().clone(), Some(acts), t.progression().map(|z| z.to_vec())).unwrap();
        }
        let config = BcConfig {
            learning_rate: 1e-3,
            steps: 1500,
            ..BcConfig::default()
        };
        let run = train_bc(&enc, &demos, &config).unwrap();
        let last = run.history.last().unwrap().loss;
        assert!(last < 1e-3, "{last}");
    }

    #[test]
    fn encoders_stay_frozen_and_training_is_deterministic() {
        let (w, enc) = setup();
        let before = enc.clone();
        let demos = w.generate_demos(1, 5).unwrap();
        let config = BcConfig {
            steps: 50,
            log_interval: 10,
            ..BcConfig::default()
        };
        let a = train_bc(&enc, &demos, &config).unwrap();
        let b = train_bc(&enc, &demos, &config).unwrap();
        assert_eq!(a, b);
        for (x, y) in before.tensors().iter().zip(enc.tensors()) {
            assert!(x.values().iter().zip(y.values()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        assert_eq!(a.history.len(), 6);
        assert_eq!(a.snapshots.len(), 5);
    }

    #[test]
    fn demos_without_actions_are_rejected() {
        let (w, enc) = setup();
        let mut demos = w.generate_demos(1, 5).unwrap();
        let t = &demos.trajectories[3];
        demos.trajectories[3] = crate::world::Trajectory::new(t.instruction(), t.observations().clone(), None, None).unwrap();
        assert!(matches!(bc_data(&enc, &demos), Err(Error::MissingActions(_))));
    }

    #[test]
    fn expert_replay_always_succeeds() {
        let (w, _) = setup();
        for l in w.vocab().instructions() {
            let task = w.vocab().task_of(l).unwrap();
            let e = evaluate_closed_loop(&w, l, 5, 1, |_, _| Ok(w.expert_action(task, 1.0))).unwrap();
            assert_eq!(e.success_rate, 1.0);
        }
    }

    #[test]
    fn random_policy_rarely_succeeds() {
        let (w, _) = setup();
        let mut rng = derive_rng(7, 0);
        let l = w.instruction(0);
        let e = evaluate_closed_loop(&w, l, 50, 0, |_, _| Ok(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])).unwrap();
        assert!(e.success_rate <= 0.1, "{e:?}");
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (w, enc) = setup();
        let mut rng = derive_rng(1, 1);
        let policy = PolicyParams::init(32, &[16], 2, &mut rng).unwrap();
        let l = w.instruction(5);
        let a = evaluate_bc(&policy, &enc, &w, l, 4, 9).unwrap();
        let b = evaluate_bc(&policy, &enc, &w, l, 4, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn policy_file_roundtrip() {
        let (w, enc) = setup();
        let demos = w.generate_demos(1, 5).unwrap();
        let config = BcConfig {
            steps: 5,
            log_interval: 5,
            hidden: vec![8],
            ..BcConfig::default()
        };
        let run = train_bc(&enc, &demos, &config).unwrap();
        let mut buf = Vec::new();
        write_policy(&run, &config, &mut buf).unwrap();
        let (p, c, h) = read_policy(buf.as_slice()).unwrap();
        assert_eq!((p, c, h), (run.policy.clone(), config, run.history.clone()));
        buf[0] = b'Z';
        assert!(read_policy(buf.as_slice()).is_err());
    }
}
