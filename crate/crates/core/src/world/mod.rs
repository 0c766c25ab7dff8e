//! Procedural video-language world.
//!
//! Every task pair shares an object; the forward task drives a latent
//! progression `z` from 0 to 1 and the mirrored task renders the same
//! features with the progression direction reversed. All tasks start from
//! one shared first-frame distribution at `z = 0`. Observations are
//!
//! ```text
//! base + s · R_obj · (z, z², sin 2πz) + (1 - z)^f · S · scene + noise   (render dims)
//! distractors + noise                                        (distractor dims)
//! ```
//!
//! where `s = ±1` is the task direction, `scene` is a per-episode nuisance
//! drawn from one distribution for every task and fading as the task
//! progresses, and the distractors follow a
//! stationary AR(1) walk that is independent of the task.

mod dataset;

pub use dataset::{read_dataset, write_dataset, Dataset, Trajectory, DATASET_FORMAT_VERSION};

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::DenseArray;
use crate::encoders::{Instruction, Vocabulary, N_VERBS};
use crate::error::{Error, Result};
use crate::rng::derive_rng;

/// Success threshold on task progression.
pub const SUCCESS_THRESHOLD: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    /// Number of (forward, mirror) task pairs; instructions = 2 × pairs.
    pub n_task_pairs: usize,
    pub d_obs: usize,
    pub noise_sigma: f64,
    pub h_min: usize,
    pub h_max: usize,
    pub d_act: usize,
    /// Seed of the rendering maps (the identity of the world).
    pub seed: u64,
    /// Trailing observation dims carrying the distractor walk.
    pub n_distractors: usize,
    /// Innovation scale of the distractor AR(1) walk (unit stationary variance).
    pub distractor_step: f64,
    /// Dimension of the per-episode nuisance drawn at reset.
    pub scene_dims: usize,
    pub scene_scale: f64,
    /// The nuisance is weighted by `(1 - z)^scene_fade`; 0 keeps it static.
    pub scene_fade: f64,
    /// Scale of the shared point every episode starts from.
    pub base_scale: f64,
    pub render_scale: f64,
    /// Progression gained per unit of action projected on the task direction.
    pub step_size: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_task_pairs: 4,
            d_obs: 32,
            noise_sigma: 0.05,
            h_min: 20,
            h_max: 40,
            d_act: 2,
            seed: 0,
            n_distractors: 8,
            distractor_step: 0.3,
            scene_dims: 4,
            scene_scale: 2.0,
            scene_fade: 1.0,
            base_scale: 3.0,
            render_scale: 1.0,
            step_size: 0.05,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.n_task_pairs, self.d_obs, self.h_min, self.h_max, self.d_act];
        if positive.contains(&0) {
            return Err(Error::InvalidArgument(format!("world sizes must be positive: {self:?}")));
        }
        if self.h_min < 2 || self.h_min > self.h_max {
            return Err(Error::InvalidArgument(format!(
                "need 2 <= h_min <= h_max, got [{}, {}]",
                self.h_min, self.h_max
            )));
        }
        if self.n_distractors >= self.d_obs {
            return Err(Error::InvalidArgument("distractor dims must leave room for rendering".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.step_size > 0.0) || !(0.0..=1.0).contains(&self.distractor_step) {
            return Err(Error::InvalidArgument(format!("invalid world scales: {self:?}")));
        }
        if (self.h_min - 1) as f64 * self.step_size < 0.95 {
            return Err(Error::InvalidArgument(format!(
                "h_min {} is too short for the expert to reach the goal at step size {}",
                self.h_min, self.step_size
            )));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::new(self.n_task_pairs)
    }

    pub fn n_tasks(&self) -> usize {
        N_VERBS * self.n_task_pairs
    }

    fn render_dims(&self) -> usize {
        self.d_obs - self.n_distractors
    }
}

/// Latent MDP state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub task: usize,
    /// Progression of `task`, clamped to `[0, 1]`.
    pub z: f64,
    pub distractors: Vec<f64>,
    pub scene: Vec<f64>,
}

/// A world instance: the fixed rendering maps and task directions.
#[derive(Clone, Debug)]
pub struct World {
    config: WorldConfig,
    base: Vec<f64>,
    /// Per object: `render_dims x 3`.
    object_maps: Vec<Vec<f64>>,
    /// `render_dims x scene_dims`.
    scene_map: Vec<f64>,
    /// Per task: unit direction in action space.
    directions: Vec<Vec<f64>>,
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = derive_rng(config.seed, 0);
        let rd = config.render_dims();
        let mut normal = |n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
        };
        let base = normal(rd, config.base_scale);
        let object_maps = (0..config.n_task_pairs)
            .map(|_| normal(rd * 3, config.render_scale / 3f64.sqrt()))
            .collect();
        let scene_map = normal(rd * config.scene_dims, config.scene_scale / (config.scene_dims.max(1) as f64).sqrt());
        let mut directions = Vec::with_capacity(config.n_tasks());
        for p in 0..config.n_task_pairs {
            let forward = if config.d_act == 2 {
                let angle = PI * p as f64 / config.n_task_pairs as f64;
                vec![angle.cos(), angle.sin()]
            } else {
                let v = normal(config.d_act, 1.0);
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            };
            let mirror = forward.iter().map(|v| -v).collect();
            directions.push(forward);
            directions.push(mirror);
        }
        Ok(Self {
            config,
            base,
            object_maps,
            scene_map,
            directions,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn vocab(&self) -> Vocabulary {
        self.config.vocab()
    }

    pub fn instruction(&self, task: usize) -> Instruction {
        self.vocab().instruction_for_task(task)
    }

    /// Unit action-space direction that advances `task`.
    pub fn direction(&self, task: usize) -> &[f64] {
        &self.directions[task]
    }

    /// A fresh episode start for `task`: `z = 0` with scene and distractors
    /// drawn from their task-independent distributions.
    pub fn reset<R: Rng + ?Sized>(&self, task: usize, rng: &mut R) -> LatentState {
        LatentState {
            task,
            z: 0.0,
            distractors: (0..self.config.n_distractors).map(|_| rng.sample(StandardNormal)).collect(),
            scene: (0..self.config.scene_dims).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }

    /// Advances the latent state. Action components outside `[-1, 1]` are
    /// clamped; the return value reports whether that happened.
    pub fn step<R: Rng + ?Sized>(&self, state: &LatentState, action: &[f64], rng: &mut R) -> Result<(LatentState, bool)> {
        if action.len() != self.config.d_act {
            return Err(Error::ShapeMismatch {
                op: "World::step",
                left: vec![self.config.d_act],
                right: vec![action.len()],
            });
        }
        let mut clamped = false;
        let dir = &self.directions[state.task];
        let mut g = 0.0;
        for (a, d) in action.iter().zip(dir) {
            let c = a.clamp(-1.0, 1.0);
            clamped |= c != *a;
            g += c * d;
        }
        let z = (state.z + self.config.step_size * g).clamp(0.0, 1.0);
        let rho = (1.0 - self.config.distractor_step.powi(2)).sqrt();
        let distractors = state
            .distractors
            .iter()
            .map(|d| rho * d + self.config.distractor_step * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok((
            LatentState {
                task: state.task,
                z,
                distractors,
                scene: state.scene.clone(),
            },
            clamped,
        ))
    }

    /// Noise-free observation of a state.
    pub fn render_clean(&self, state: &LatentState) -> Vec<f64> {
        let rd = self.config.render_dims();
        let object = state.task / N_VERBS;
        let sign = if state.task.is_multiple_of(N_VERBS) { 1.0 } else { -1.0 };
        let z = state.z;
        let features = [sign * z, sign * z * z, sign * (2.0 * PI * z).sin()];
        let map = &self.object_maps[object];
        let fade = (1.0 - z).powf(self.config.scene_fade);
        let sd = self.config.scene_dims;
        let mut obs = Vec::with_capacity(self.config.d_obs);
        for r in 0..rd {
            let mut v = self.base[r];
            for (c, f) in features.iter().enumerate() {
                v += map[r * 3 + c] * f;
            }
            for (c, s) in state.scene.iter().enumerate() {
                v += fade * self.scene_map[r * sd + c] * s;
            }
            obs.push(v);
        }
        obs.extend_from_slice(&state.distractors);
        obs
    }

    /// Observation with additive Gaussian noise of scale `noise_sigma`.
    pub fn render<R: Rng + ?Sized>(&self, state: &LatentState, rng: &mut R) -> Vec<f64> {
        let mut obs = self.render_clean(state);
        if self.config.noise_sigma > 0.0 {
            for v in &mut obs {
                *v += self.config.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        obs
    }

    /// Progression of `state` as seen by instruction `l`: `z` for its own
    /// task, `1 - z` for the mirror, 0.5 otherwise.
    pub fn progression(&self, state_task: usize, z: f64, l: Instruction) -> Result<f64> {
        let task = self.vocab().task_of(l)?;
        Ok(if task == state_task {
            z
        } else if task / N_VERBS == state_task / N_VERBS {
            1.0 - z
        } else {
            0.5
        })
    }

    pub fn success(&self, state: &LatentState, l: Instruction) -> Result<bool> {
        Ok(self.progression(state.task, state.z, l)? > SUCCESS_THRESHOLD)
    }

    /// Scripted expert action: push along the task direction with magnitude
    /// `gain`, clamped to `[0, 1]`.
    pub fn expert_action(&self, task: usize, gain: f64) -> Vec<f64> {
        let g = gain.clamp(0.0, 1.0);
        self.directions[task].iter().map(|d| d * g).collect()
    }

    /// One expert demonstration of `task` with `h` frames. Per-step gains are
    /// randomised around the pace that reaches `z = 1` at the last frame, with
    /// full speed whenever reaching 0.95 would otherwise become infeasible.
    pub fn generate_trajectory<R: Rng + ?Sized>(&self, task: usize, h: usize, rng: &mut R) -> Result<Trajectory> {
        if h < 2 {
            return Err(Error::TrajectoryTooShort(h));
        }
        let alpha = self.config.step_size;
        let mut state = self.reset(task, rng);
        let mut observations = Vec::with_capacity(h * self.config.d_obs);
        let mut actions = Vec::with_capacity((h - 1) * self.config.d_act);
        let mut progression = Vec::with_capacity(h);
        observations.extend(self.render(&state, rng));
        progression.push(state.z);
        for t in 0..h - 1 {
            let remaining = (h - 1 - t) as f64;
            let pace = (1.0 - state.z).max(0.0) / (alpha * remaining);
            let jitter: f64 = rng.random_range(0.5..1.5);
            let behind = 0.95 - state.z > alpha * (remaining - 1.0);
            let gain = if behind { 1.0 } else { pace * jitter };
            let action = self.expert_action(task, gain);
            let (next, _) = self.step(&state, &action, rng)?;
            state = next;
            actions.extend(action);
            observations.extend(self.render(&state, rng));
            progression.push(state.z);
        }
        Trajectory::new(
            self.instruction(task),
            DenseArray::matrix(h, self.config.d_obs, observations)?,
            Some(DenseArray::matrix(h - 1, self.config.d_act, actions)?),
            Some(progression),
        )
    }

    /// `n` demonstrations with tasks drawn uniformly and lengths uniform in
    /// `[h_min, h_max]`. Trajectory `i` uses its own derived generator.
    pub fn generate_dataset(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::InvalidArgument("dataset must contain at least one trajectory".into()));
        }
        let trajectories = (0..n)
            .map(|i| {
                let mut rng = derive_rng(seed, i as u64 + 1);
                let task = rng.random_range(0..self.config.n_tasks());
                let h = rng.random_range(self.config.h_min..=self.config.h_max);
                self.generate_trajectory(task, h, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            world: self.config.clone(),
            seed,
            trajectories,
        })
    }

    /// `per_task` demonstrations of every task, in task order.
    pub fn generate_demos(&self, per_task: usize, seed: u64) -> Result<Dataset> {
        let mut trajectories = Vec::with_capacity(per_task * self.config.n_tasks());
        for task in 0..self.config.n_tasks() {
            for k in 0..per_task {
                let mut rng = derive_rng(seed, (task * per_task + k) as u64 + 1);
                let h = rng.random_range(self.config.h_min..=self.config.h_max);
                trajectories.push(self.generate_trajectory(task, h, &mut rng)?);
            }
        }
        Ok(Dataset {
            world: self.config.clone(),
            seed,
            trajectories,
        })
    }

    /// Per-frame ground-truth progression of `traj` under instruction `l`.
    pub fn progression_oracle(&self, traj: &Trajectory, l: Instruction) -> Result<Vec<f64>> {
        let z = traj
            .progression()
            .ok_or_else(|| Error::InvalidArgument("trajectory carries no ground-truth progression".into()))?;
        let own = self.vocab().task_of(traj.instruction())?;
        z.iter().map(|&zt| self.progression(own, zt, l)).collect()
    }
}

/// A running episode: world, current state and the generator driving the
/// distractor walk. Cloning an `Env` forks an identical future.
#[derive(Clone, Debug)]
pub struct Env<'w> {
    world: &'w World,
    state: LatentState,
    rng: ChaCha8Rng,
    clamped_actions: usize,
}

impl<'w> Env<'w> {
    pub fn new(world: &'w World, task: usize, seed: u64) -> Self {
        let mut rng = derive_rng(seed, 0);
        let state = world.reset(task, &mut rng);
        Self {
            world,
            state,
            rng,
            clamped_actions: 0,
        }
    }

    pub fn world(&self) -> &'w World {
        self.world
    }

    pub fn state(&self) -> &LatentState {
        &self.state
    }

    /// Number of actions that had to be clamped into `[-1, 1]`.
    pub fn clamped_actions(&self) -> usize {
        self.clamped_actions
    }

    pub fn step(&mut self, action: &[f64]) -> Result<&LatentState> {
        let (next, clamped) = self.world.step(&self.state, action, &mut self.rng)?;
        self.clamped_actions += clamped as usize;
        self.state = next;
        Ok(&self.state)
    }

    pub fn observe_clean(&self) -> Vec<f64> {
        self.world.render_clean(&self.state)
    }

    pub fn observe(&mut self) -> Vec<f64> {
        self.world.render(&self.state, &mut self.rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn world() -> World {
        World::new(WorldConfig::default()).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = WorldConfig {
            noise_sigma: 0.0,
            n_distractors: 0,
            ..Default::default()
        };
        let w = World::new(cfg).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(4);
        let mut b = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(w.generate_trajectory(2, 25, &mut a).unwrap(), w.generate_trajectory(2, 25, &mut b).unwrap());
        assert_eq!(world().generate_dataset(10, 3).unwrap(), world().generate_dataset(10, 3).unwrap());
    }

    #[test]
    fn oracle_trends() {
        let w = world();
        let ds = w.generate_dataset(40, 11).unwrap();
        for traj in &ds.trajectories {
            let own = w.progression_oracle(traj, traj.instruction()).unwrap();
            assert!(own.windows(2).all(|p| p[1] >= p[0]));
            assert!(*own.last().unwrap() > SUCCESS_THRESHOLD);
            let mirror = w.progression_oracle(traj, traj.instruction().mirror()).unwrap();
            assert!(mirror.windows(2).all(|p| p[1] <= p[0]));
            let other_task = (w.vocab().task_of(traj.instruction()).unwrap() + 2) % 8;
            let unrelated = w.progression_oracle(traj, w.instruction(other_task)).unwrap();
            assert!(unrelated.iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn matched_and_mirror_endpoints() {
        let w = world();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let traj = w.generate_trajectory(0, 30, &mut rng).unwrap();
        let own = w.progression_oracle(&traj, traj.instruction()).unwrap();
        assert_eq!(own[0], 0.0);
        assert!(*own.last().unwrap() > SUCCESS_THRESHOLD);
        let mirror = w.progression_oracle(&traj, traj.instruction().mirror()).unwrap();
        assert_eq!(mirror[0], 1.0);
        assert!(*mirror.last().unwrap() < 1.0 - SUCCESS_THRESHOLD);
    }

    #[test]
    fn step_examples() {
        let w = world();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s0 = w.reset(3, &mut rng);
        let (s1, _) = w.step(&s0, &[0.0, 0.0], &mut rng).unwrap();
        assert_eq!(s1.z, s0.z);

        let dir = w.direction(3).to_vec();
        let mut s = s0.clone();
        for _ in 0..20 {
            s = w.step(&s, &dir, &mut rng).unwrap().0;
        }
        assert!((s.z - 1.0).abs() < 1e-12, "{}", s.z);

        let anti: Vec<f64> = dir.iter().map(|d| -d).collect();
        let (s2, _) = w.step(&s0, &anti, &mut rng).unwrap();
        assert_eq!(s2.z, 0.0);

        let mut env = Env::new(&w, 3, 9);
        env.step(&[2.0, -3.0]).unwrap();
        assert_eq!(env.clamped_actions(), 1);
    }

    #[test]
    fn render_examples() {
        let cfg = WorldConfig {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let w = World::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // at z = 0 every task renders the same base point for the same scene
        let s = w.reset(0, &mut rng);
        let mut t = s.clone();
        t.task = 5;
        assert_eq!(w.render_clean(&s), w.render_clean(&t));
        // injective in z: the rendering is a fixed linear map of ±(z, z², sin 2πz)
        let obs: Vec<Vec<f64>> = (0..=10)
            .map(|i| {
                let mut st = s.clone();
                st.z = i as f64 / 10.0;
                w.render(&st, &mut rng)
            })
            .collect();
        for i in 0..obs.len() {
            for j in i + 1..obs.len() {
                assert_ne!(obs[i], obs[j]);
            }
        }
    }

    #[test]
    fn success_examples() {
        let w = world();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = w.reset(2, &mut rng);
        let l = w.instruction(2);
        assert!(!w.success(&s, l).unwrap());
        s.z = 1.0;
        assert!(w.success(&s, l).unwrap());
        assert!(!w.success(&s, l.mirror()).unwrap());
    }

    #[test]
    fn experts_always_succeed() {
        let w = world();
        for (i, traj) in w.generate_dataset(500, 5).unwrap().trajectories.iter().enumerate() {
            let z = traj.progression().unwrap();
            assert!(*z.last().unwrap() > SUCCESS_THRESHOLD, "demo {i}");
            assert!(traj.len() <= w.config().h_max);
        }
    }

    #[test]
    fn distractors_do_not_predict_task() {
        // nearest-class-mean probe on time-averaged distractor dims
        let w = world();
        let cfg = w.config().clone();
        let features = |ds: &Dataset| -> Vec<(usize, Vec<f64>)> {
            ds.trajectories
                .iter()
                .map(|t| {
                    let task = w.vocab().task_of(t.instruction()).unwrap();
                    let mut f = vec![0.0; cfg.n_distractors];
                    for i in 0..t.len() {
                        for (k, v) in t.observation(i)[cfg.d_obs - cfg.n_distractors..].iter().enumerate() {
                            f[k] += v / t.len() as f64;
                        }
                    }
                    (task, f)
                })
                .collect()
        };
        let train = features(&w.generate_dataset(1000, 21).unwrap());
        let test = features(&w.generate_dataset(1000, 22).unwrap());
        let mut means = vec![vec![0.0; cfg.n_distractors]; cfg.n_tasks()];
        let mut counts = vec![0.0; cfg.n_tasks()];
        for (task, f) in &train {
            counts[*task] += 1.0;
            for (m, v) in means[*task].iter_mut().zip(f) {
                *m += v;
            }
        }
        for (m, c) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= c);
        }
        let correct = test
            .iter()
            .filter(|(task, f)| {
                let d = |m: &Vec<f64>| m.iter().zip(f).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let best = (0..cfg.n_tasks()).min_by(|&a, &b| d(&means[a]).total_cmp(&d(&means[b]))).unwrap();
                best == *task
            })
            .count();
        let acc = correct as f64 / test.len() as f64;
        assert!((acc - 1.0 / cfg.n_tasks() as f64).abs() <= 0.05, "probe accuracy {acc}");
    }

    #[test]
    fn first_frames_share_one_distribution() {
        // per-dimension two-sample z-tests between task 0 and every other task,
        // Bonferroni-corrected at overall significance 0.01
        let w = world();
        let ds = w.generate_demos(150, 31).unwrap();
        let d = w.config().d_obs;
        let by_task: Vec<Vec<&[f64]>> = (0..8)
            .map(|t| ds.trajectories[t * 150..(t + 1) * 150].iter().map(|tr| tr.observation(0)).collect())
            .collect();
        let stats = |rows: &[&[f64]], k: usize| {
            let n = rows.len() as f64;
            let mean = rows.iter().map(|r| r[k]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (mean, var / n)
        };
        let normal = Normal::standard();
        let tests = 7 * d;
        for t in 1..8 {
            for k in 0..d {
                let (m0, v0) = stats(&by_task[0], k);
                let (m1, v1) = stats(&by_task[t], k);
                let z = (m0 - m1) / (v0 + v1).sqrt();
                let p = 2.0 * (1.0 - normal.cdf(z.abs()));
                assert!(p > 0.01 / tests as f64, "task {t} dim {k}: p = {p}");
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(World::new(WorldConfig { h_min: 1, ..Default::default() }).is_err());
        assert!(World::new(WorldConfig { h_min: 10, ..Default::default() }).is_err());
        assert!(World::new(WorldConfig { n_distractors: 32, ..Default::default() }).is_err());
        assert!(world().generate_dataset(0, 1).is_err());
    }
}
