//! Fully resolved subcommand runs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use decisionnce::encoders::{EncoderParams, Instruction};
use decisionnce::lcbc::{evaluate_bc_all, mean_success, save_policy, train_bc, BcConfig, BcEvaluation, BcRecord};
use decisionnce::planner::{evaluate_planner, PlannerConfig, PlannerPolicy, PlannerReport};
use decisionnce::reward::{
    check_compatible, first_image_similarity_stats, mid_frame_pairwise_mean, reward_curve, reward_heatmap,
    segments_of_lengths, FirstImageStats, RewardForm,
};
use decisionnce::rng::{derive_rng, derive_seed};
use decisionnce::sampler::{empirical_goal_histogram, ChiSquareTest};
use decisionnce::trainer::{initial_params, load_checkpoint, save_checkpoint, train, write_metrics_csv, Checkpoint, TrainConfig};
use decisionnce::world::{Dataset, World, WorldConfig};
use serde::{Deserialize, Serialize};

use crate::run::Run;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let file = File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Checkpoint and dataset, checked against each other.
fn load_pair(ckpt: &Path, data: &Path) -> Result<(Checkpoint, Dataset)> {
    let ckpt = load_ckpt(ckpt)?;
    let data = load_dataset(data)?;
    check_compatible(&ckpt.params, &data.world)?;
    Ok((ckpt, data))
}

fn parse_instructions(world: &WorldConfig, texts: &[String]) -> Result<Vec<Instruction>> {
    let vocab = world.vocab();
    if texts.is_empty() {
        return Ok(vocab.instructions());
    }
    texts.iter().map(|t| Ok(vocab.parse(t)?)).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenWorldRun {
    pub world: WorldConfig,
    /// Trajectories with random tasks; ignored when `demos_per_task` is set.
    pub count: usize,
    /// Generates this many expert demonstrations of every task instead.
    pub demos_per_task: Option<usize>,
    pub seed: u64,
    pub out: PathBuf,
}

impl Run for GenWorldRun {
    const NAME: &'static str = "gen-world";

    fn seed(&self) -> u64 {
        self.seed
    }

    fn inputs(&self) -> Vec<PathBuf> {
        Vec::new()
    }

    fn outputs_mut(&mut self) -> Vec<&mut PathBuf> {
        vec![&mut self.out]
    }

    fn execute(&self) -> Result<()> {
        let world = World::new(self.world.clone())?;
        let data = match self.demos_per_task {
            Some(0) => bail!("demos per task must be at least 1"),
            Some(k) => world.generate_demos(k, self.seed)?,
            None => world.generate_dataset(self.count, self.seed)?,
        };
        let mut out = create(&self.out)?;
        decisionnce::world::write_dataset(&data, &mut out)?;
        log::info!("wrote {} trajectories to {}", data.len(), self.out.display());
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainRun {
    pub data: PathBuf,
    pub out: PathBuf,
    pub metrics: PathBuf,
    pub train: TrainConfig,
}

impl Run for TrainRun {
    const NAME: &'static str = "train";

    fn seed(&self) -> u64 {
        self.train.seed
    }

    fn inputs(&self) -> Vec<PathBuf> {
        vec![self.data.clone()]
    }

    fn outputs_mut(&mut self) -> Vec<&mut PathBuf> {
        vec![&mut self.out, &mut self.metrics]
    }

    fn execute(&self) -> Result<()> {
        let data = load_dataset(&self.data)?;
        log::info!(
            "training {} for {} iterations on {} trajectories",
            self.train.objective.variant.name(),
            self.train.iterations,
            data.len()
        );
        let ckpt = train(&self.train, &data)?;
        if let Some(last) = ckpt.metrics.last() {
            log::info!("final loss {:.6} (first {:.6})", last.loss, ckpt.metrics[0].loss);
        }
        if let Some(dir) = self.out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        save_checkpoint(&ckpt, &self.out)?;
        write_metrics_csv(&ckpt.metrics, create(&self.metrics)?)?;
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SamplingRun {
    pub h: usize,
    pub samples: u64,
    pub seed: u64,
    pub out: PathBuf,
    pub summary: PathBuf,
}

#[derive(Debug, Serialize)]
struct SamplingSummary {
    h: usize,
    samples: u64,
    no_goal_analytic: f64,
    no_goal_empirical: f64,
    max_abs_deviation: f64,
    /// Analytic probabilities strictly increase over frames `2..=h`.
    analytic_monotone: bool,
    empirical_monotone: bool,
    chi_square: ChiSquareTest,
}

fn increasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] > w[0])
}

impl Run for SamplingRun {
    const NAME: &'static str = "sampling-stats";

    fn seed(&self) -> u64 {
        self.seed
    }

    fn inputs(&self) -> Vec<PathBuf> {
        Vec::new()
    }

    fn outputs_mut(&mut self) -> Vec<&mut PathBuf> {
        vec![&mut self.out, &mut self.summary]
    }

    fn execute(&self) -> Result<()> {
        let hist = empirical_goal_histogram(self.h, self.samples, &mut derive_rng(self.seed, 0))?;
        let analytic = hist.analytic();
        let empirical = hist.frequencies();
        let mut out = create(&self.out)?;
        writeln!(out, "t,analytic,empirical")?;
        for (t, (a, e)) in analytic.iter().zip(&empirical).enumerate() {
            writeln!(out, "{},{},{}", t + 1, a, e)?;
        }
        out.flush()?;
        let summary = SamplingSummary {
            h: self.h,
            samples: self.samples,
            no_goal_analytic: 1.0 / self.h as f64,
            no_goal_empirical: hist.no_goal_frequency(),
            max_abs_deviation: hist.max_abs_deviation(),
            analytic_monotone: increasing(&analytic[1..]),
            empirical_monotone: increasing(&empirical[1..]),
            chi_square: hist.chi_square(),
        };
        log::info!("chi-square p = {:.4}", summary.chi_square.p_value);
        write_json(&self.summary, &summary)
    }
}

/// Which instruction a reward curve is scored against.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", content = "text", rename_all = "lowercase")]
pub enum CurveInstruction {
    /// The trajectory's own instruction.
    Matched,
    Mirror,
    Given(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RewardCurveRun {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub trajectory: usize,
    pub instruction: CurveInstruction,
    pub seed: u64,
    pub out: PathBuf,
}

impl Run for RewardCurveRun {
    const NAME: &'static str = "reward-curve";

    fn seed(&self) -> u64 {
        self.seed
    }

    fn inputs(&self) -> Vec<PathBuf> {
        vec![self.ckpt.clone(), self.data.clone()]
    }

    fn outputs_mut(&mut self) -> Vec<&mut PathBuf> {
        vec![&mut self.out]
    }

    fn execute(&self) -> Result<()> {
        let (ckpt, data) = load_pair(&self.ckpt, &self.data)?;
        let traj = data
            .trajectories
            .get(self.trajectory)
            .with_context(|| format!("dataset has {} trajectories, asked for index {}", data.len(), self.trajectory))?;
        let l = match &self.instruction {
            CurveInstruction::Matched => traj.instruction(),
            CurveInstruction::Mirror => traj.instruction().mirror(),
            CurveInstruction::Given(text) => data.world.vocab().parse(text)?,
        };
        let curve = reward_curve(&ckpt.params, traj, l)?;
        log::info!("spearman(t, reward) = {:.4}", curve.spearman());
        curve.write_csv(create(&self.out)?)?;
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeatmapRun {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    /// Segment lengths; 0 means the whole trajectory.
    pub lengths: Vec<usize>,
    /// Rows come from the first this-many trajectories.
    pub trajectories: usize,
    /// Defaults to the form matching the checkpoint's objective.
    pub form: Option<RewardForm>,
    pub seed: u64,
    pub out: PathBuf,
    pub summary: PathBuf,
}

#[derive(Debug, Serialize)]
struct HeatmapSummary {
    form: RewardForm,
    rows: usize,
    cols: usize,
    diagonal_max_fraction: f64,
    mirror_negative_fraction: f64,
}

impl Run for HeatmapRun {
    const NAME: &'static str = "heatmap";

    fn seed(&self) -> u64 {
        self.seed
    }

    fn inputs(&self) -> Vec<PathBuf> {
        vec![self.ckpt.clone(), self.data.clone()]
    }

    fn outputs_mut(&mut self) -> Vec<&mut PathBuf> {
        vec![&mut self.out, &mut self.summary]
    }

    fn execute(&self) -> Result<()> {
        let (ckpt, data) = load_pair(&self.ckpt, &self.data)?;
        let form = self
            .form
            .unwrap_or_else(|| RewardForm::for_variant(ckpt.config.objective.variant));
        let rows: Vec<usize> = (0..self.trajectories.min(data.len())).collect();
        let segments = segments_of_lengths(&data, &rows, &self.lengths, &mut derive_rng(self.seed, 0))?;
        let vocab = data.world.vocab();
        let grid = reward_heatmap(&ckpt.params, form, &data, &segments, &vocab.instructions())?;
        grid.write_csv(&vocab, create(&self.out)?)?;
        let summary = HeatmapSummary {
            form,
            rows: grid.rows(),
            cols: grid.cols(),
            diagonal_max_fraction: grid.diagonal_max_fraction(),
            mirror_negative_fraction: grid.mirror_negative_fraction(),
        };
        log::info!(
            "diagonal-max rows {:.3}, mirror-negative rows {:.3}",
            summary.diagonal_max_fraction,
            summary.mirror_negative_fraction
        );
        write_json(&self.summary, &summary)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FirstImageRun {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct FirstImageReport {
    first_image: FirstImageStats,
    /// Same statistic over one random interior frame per trajectory.
    mid_frame_pairwise_mean: f64,
    margin: f64,
}

impl Run for FirstImageRun {
    const NAME: &'static str = "first-image-stats";

    fn seed(&self) -> u64 {
        self.seed
    }

    fn inputs(&self) -> Vec<PathBuf> {
        vec![self.ckpt.clone(), self.data.clone()]
    }

    fn outputs_mut(&mut self) -> Vec<&mut PathBuf> {
        vec![&mut self.out]
    }

    fn execute(&self) -> Result<()> {
        let (ckpt, data) = load_pair(&self.ckpt, &self.data)?;
        let first_image = first_image_similarity_stats(&ckpt.params, &data)?;
        let mid = mid_frame_pairwise_mean(&ckpt.params, &data, &mut derive_rng(self.seed, 0))?;
        write_json(
            &self.out,
            &FirstImageReport {
                first_image,
                mid_frame_pairwise_mean: mid,
                margin: first_image.pairwise_mean - mid,
            },
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Embedding,
    Oracle,
    Random,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlanRun {
    /// Required by the embedding policy.
    pub ckpt: Option<PathBuf>,
    pub world: WorldConfig,
    /// Empty means every instruction of the world.
    pub instructions: Vec<String>,
    pub policy: PolicyKind,
    pub episodes: usize,
    pub planner: PlannerConfig,
    pub seed: u64,
    pub out: PathBuf,
}

impl Run for PlanRun {
    const NAME: &'static str = "plan";

    fn seed(&self) -> u64 {
        self.seed
    }

    fn inputs(&self) -> Vec<PathBuf> {
        self.ckpt.iter().cloned().collect()
    }

    fn outputs_mut(&mut self) -> Vec<&mut PathBuf> {
        vec![&mut self.out]
    }

    fn execute(&self) -> Result<()> {
        let world = World::new(self.world.clone())?;
        let instructions = parse_instructions(&self.world, &self.instructions)?;
        let ckpt = self.ckpt.as_deref().map(load_ckpt).transpose()?;
        if let Some(c) = &ckpt {
            check_compatible(&c.params, &self.world)?;
        }
        let policy = match (self.policy, &ckpt) {
            (PolicyKind::Embedding, Some(c)) => PlannerPolicy::Embedding(&c.params),
            (PolicyKind::Embedding, None) => bail!("the embedding policy needs --ckpt"),
            (PolicyKind::Oracle, _) => PlannerPolicy::Oracle,
            (PolicyKind::Random, _) => PlannerPolicy::Random,
        };
        let report: PlannerReport = evaluate_planner(policy, &world, &instructions, self.episodes, &self.planner, self.seed)?;
        log::info!("{} planner success {:.3}", report.policy, report.success_rate);
        write_json(&self.out, &report)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// The checkpoint's trained encoders.
    Trained,
    /// The same run's encoders at initialization.
    Random,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalLcbcRun {
    pub ckpt: PathBuf,
    pub demos: PathBuf,
    pub encoder: EncoderKind,
    pub bc: BcConfig,
    /// Closed-loop episodes per instruction.
    pub episodes: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub policy_out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct CheckpointSuccess {
    step: usize,
    success_rate: f64,
}

#[derive(Debug, Serialize)]
struct LcbcReport {
    encoder: EncoderKind,
    seed: u64,
    demos: usize,
    episodes_per_instruction: usize,
    final_success_rate: f64,
    final_per_instruction: Vec<BcEvaluation>,
    max_success_rate: f64,
    max_step: usize,
    checkpoints: Vec<CheckpointSuccess>,
    history: Vec<BcRecord>,
    config: BcConfig,
}

impl Run for EvalLcbcRun {
    const NAME: &'static str = "eval-lcbc";

    fn seed(&self) -> u64 {
        self.seed
    }

    fn inputs(&self) -> Vec<PathBuf> {
        vec![self.ckpt.clone(), self.demos.clone()]
    }

    fn outputs_mut(&mut self) -> Vec<&mut PathBuf> {
        let mut v = vec![&mut self.out];
        v.extend(self.policy_out.as_mut());
        v
    }

    fn execute(&self) -> Result<()> {
        let (ckpt, demos) = load_pair(&self.ckpt, &self.demos)?;
        let encoders: EncoderParams = match self.encoder {
            EncoderKind::Trained => ckpt.params,
            EncoderKind::Random => initial_params(&ckpt.config)?,
        };
        let world = World::new(demos.world.clone())?;
        let run = train_bc(&encoders, &demos, &self.bc)?;
        let eval_seed = derive_seed(self.seed, 1);
        let final_evals = evaluate_bc_all(&run.policy, &encoders, &world, self.episodes, eval_seed)?;
        let final_success_rate = mean_success(&final_evals);
        let mut checkpoints = Vec::with_capacity(run.snapshots.len());
        for (step, policy) in &run.snapshots {
            let evals = evaluate_bc_all(policy, &encoders, &world, self.episodes, eval_seed)?;
            checkpoints.push(CheckpointSuccess {
                step: *step,
                success_rate: mean_success(&evals),
            });
        }
        let best = checkpoints
            .iter()
            .fold(None::<&CheckpointSuccess>, |b, c| match b {
                Some(b) if b.success_rate >= c.success_rate => Some(b),
                _ => Some(c),
            });
        let (max_step, max_success_rate) = match best {
            Some(b) if b.success_rate > final_success_rate => (b.step, b.success_rate),
            _ => (self.bc.steps, final_success_rate),
        };
        log::info!("LCBC success: final {final_success_rate:.3}, max {max_success_rate:.3} at step {max_step}");
        if let Some(path) = &self.policy_out {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            save_policy(&run, &self.bc, path)?;
        }
        write_json(
            &self.out,
            &LcbcReport {
                encoder: self.encoder,
                seed: self.seed,
                demos: demos.len(),
                episodes_per_instruction: self.episodes,
                final_success_rate,
                final_per_instruction: final_evals,
                max_success_rate,
                max_step,
                checkpoints,
                history: run.history,
                config: self.bc.clone(),
            },
        )
    }
}
