//! `dnce`: dataset generation, encoder training, reward analysis, planning
//! and LCBC evaluation on the synthetic world.

mod commands;
mod run;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use decisionnce::lcbc::BcConfig;
use decisionnce::manifest::RunManifest;
use decisionnce::objectives::Variant;
use decisionnce::planner::{PlannerConfig, Warmstart};
use decisionnce::reward::RewardForm;
use decisionnce::trainer::{load_checkpoint, TrainConfig};
use decisionnce::world::{Dataset, WorldConfig};
use serde::de::DeserializeOwned;

use commands::{
    CurveInstruction, EncoderKind, EvalLcbcRun, FirstImageRun, GenWorldRun, HeatmapRun, PlanRun, PolicyKind,
    RewardCurveRun, SamplingRun, TrainRun,
};
use run::{record, replay, suffixed};

#[derive(Parser, Debug)]
#[command(name = "dnce", version, about = "Contrastive trajectory-language reward learning on a synthetic world")]
struct Cli {
    /// Only print errors.
    #[arg(long, short, global = true, conflicts_with = "verbose")]
    quiet: bool,
    /// Print debug messages.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset of synthetic trajectories.
    GenWorld(GenWorldArgs),
    /// Train encoders with one of the contrastive objectives.
    Train(TrainArgs),
    /// Compare simulated goal-frame frequencies with the closed form.
    SamplingStats(SamplingArgs),
    /// Export the per-frame reward of one trajectory.
    RewardCurve(RewardCurveArgs),
    /// Export segment-by-instruction rewards.
    Heatmap(HeatmapArgs),
    /// Report clustering of first-frame embeddings.
    FirstImageStats(FirstImageArgs),
    /// Evaluate an MPPI planner.
    Plan(PlanArgs),
    /// Train and evaluate a language-conditioned behaviour-cloning policy.
    EvalLcbc(EvalLcbcArgs),
    /// Re-run a recorded run and compare its outputs byte for byte.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
struct GenWorldArgs {
    /// World configuration (JSON); unspecified fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// Write this many expert demonstrations per task instead of `--count`
    /// random-task trajectories.
    #[arg(long)]
    demos_per_task: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Objective {
    P,
    T,
    T4,
    T8,
    FrameAlign,
}

impl From<Objective> for Variant {
    fn from(o: Objective) -> Self {
        match o {
            Objective::P => Variant::P,
            Objective::T => Variant::T,
            Objective::T4 => Variant::T4,
            Objective::T8 => Variant::T8,
            Objective::FrameAlign => Variant::FrameAlign,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    objective: Option<Objective>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Loss CSV; defaults to `<out>.metrics.csv`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Training configuration (JSON); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Softmax temperature of the contrastive loss.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SamplingArgs {
    /// Trajectory length.
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    h: u64,
    #[arg(long, default_value_t = 1_000_000, value_parser = clap::value_parser!(u64).range(1..))]
    samples: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV of `t,analytic,empirical`.
    #[arg(long)]
    out: PathBuf,
    /// Summary JSON; defaults to `<out>.summary.json`.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CkptData {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct RewardCurveArgs {
    #[command(flatten)]
    inputs: CkptData,
    /// Trajectory index in the dataset.
    #[arg(long, default_value_t = 0)]
    trajectory: usize,
    /// Instruction such as "open drawer"; defaults to the trajectory's own.
    #[arg(long, conflicts_with = "mirror")]
    instruction: Option<String>,
    /// Score against the mirror of the trajectory's instruction.
    #[arg(long)]
    mirror: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    #[command(flatten)]
    inputs: CkptData,
    /// Segment lengths; 0 selects the whole trajectory.
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 5, 10, 0])]
    lengths: Vec<usize>,
    /// Use the first this-many trajectories.
    #[arg(long, default_value_t = 40)]
    trajectories: usize,
    #[arg(long, value_enum)]
    form: Option<FormArg>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Summary JSON; defaults to `<out>.summary.json`.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormArg {
    Potential,
    Transition,
}

#[derive(Args, Debug)]
struct FirstImageArgs {
    #[command(flatten)]
    inputs: CkptData,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum WarmstartArg {
    Zeros,
    Expert,
}

#[derive(Args, Debug)]
struct PlanArgs {
    /// Trained encoders; required by the embedding policy.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// World configuration (JSON); defaults to the checkpoint's world.
    #[arg(long)]
    world: Option<PathBuf>,
    /// Instruction to plan for; repeat for several. Defaults to all.
    #[arg(long)]
    instruction: Vec<String>,
    #[arg(long, value_enum, default_value = "embedding")]
    policy: PolicyKind,
    #[arg(long, default_value_t = 50)]
    episodes: usize,
    /// Planner configuration (JSON); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    sequences: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    noise_scale: Option<f64>,
    #[arg(long, value_enum)]
    warmstart: Option<WarmstartArg>,
    /// Per-step gain of the expert warmstart.
    #[arg(long, default_value_t = 0.3)]
    warmstart_gain: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalLcbcArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Demonstrations with actions, as written by `gen-world --demos-per-task`.
    #[arg(long)]
    demos: PathBuf,
    #[arg(long, value_enum, default_value = "trained")]
    encoder: EncoderKind,
    /// Behaviour-cloning configuration (JSON); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    log_interval: Option<usize>,
    /// Closed-loop episodes per instruction.
    #[arg(long, default_value_t = 25)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also save the trained policy here.
    #[arg(long)]
    policy_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Must match the recorded seed when given.
    #[arg(long)]
    seed: Option<u64>,
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("invalid config {}", p.display()))
        }
    }
}

/// Paths are recorded absolute so a manifest replays from any directory.
fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).with_context(|| format!("resolving {}", p.display()))
}

fn gen_world(a: GenWorldArgs) -> Result<GenWorldRun> {
    let world: WorldConfig = read_config(a.config.as_deref())?;
    world.validate().context("invalid world configuration")?;
    if a.demos_per_task.is_none() && a.count == 0 {
        bail!("--count must be at least 1");
    }
    Ok(GenWorldRun {
        world,
        count: a.count,
        demos_per_task: a.demos_per_task,
        seed: a.seed,
        out: absolute(&a.out)?,
    })
}

fn train(a: TrainArgs) -> Result<TrainRun> {
    let mut c: TrainConfig = read_config(a.config.as_deref())?;
    if let Some(o) = a.objective {
        c.objective.variant = o.into();
    }
    if let Some(v) = a.lr {
        c.learning_rate = v;
    }
    if let Some(v) = a.iterations {
        c.iterations = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.weight_decay {
        c.weight_decay = v;
    }
    if let Some(v) = a.temperature {
        c.objective.temperature = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    // The encoders follow the data's observation width and vocabulary.
    let data = Dataset::load(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    c.encoder.d_obs = data.world.d_obs;
    c.encoder.vocab = data.world.vocab();
    c.validate()?;
    let out = absolute(&a.out)?;
    Ok(TrainRun {
        data: absolute(&a.data)?,
        metrics: absolute(&a.metrics.unwrap_or_else(|| suffixed(&a.out, ".metrics.csv")))?,
        out,
        train: c,
    })
}

fn sampling(a: SamplingArgs) -> Result<SamplingRun> {
    Ok(SamplingRun {
        h: a.h as usize,
        samples: a.samples,
        seed: a.seed,
        summary: absolute(&a.summary.unwrap_or_else(|| suffixed(&a.out, ".summary.json")))?,
        out: absolute(&a.out)?,
    })
}

fn reward_curve(a: RewardCurveArgs) -> Result<RewardCurveRun> {
    let instruction = match (a.instruction, a.mirror) {
        (Some(text), _) => CurveInstruction::Given(text),
        (None, true) => CurveInstruction::Mirror,
        (None, false) => CurveInstruction::Matched,
    };
    Ok(RewardCurveRun {
        ckpt: absolute(&a.inputs.ckpt)?,
        data: absolute(&a.inputs.data)?,
        trajectory: a.trajectory,
        instruction,
        seed: a.seed,
        out: absolute(&a.out)?,
    })
}

fn heatmap(a: HeatmapArgs) -> Result<HeatmapRun> {
    if a.lengths.is_empty() || a.trajectories == 0 {
        bail!("need at least one segment length and one trajectory");
    }
    Ok(HeatmapRun {
        ckpt: absolute(&a.inputs.ckpt)?,
        data: absolute(&a.inputs.data)?,
        lengths: a.lengths,
        trajectories: a.trajectories,
        form: a.form.map(|f| match f {
            FormArg::Potential => RewardForm::Potential,
            FormArg::Transition => RewardForm::Transition,
        }),
        seed: a.seed,
        summary: absolute(&a.summary.unwrap_or_else(|| suffixed(&a.out, ".summary.json")))?,
        out: absolute(&a.out)?,
    })
}

fn first_image(a: FirstImageArgs) -> Result<FirstImageRun> {
    Ok(FirstImageRun {
        ckpt: absolute(&a.inputs.ckpt)?,
        data: absolute(&a.inputs.data)?,
        seed: a.seed,
        out: absolute(&a.out)?,
    })
}

fn plan(a: PlanArgs) -> Result<PlanRun> {
    let mut p: PlannerConfig = read_config(a.config.as_deref())?;
    if let Some(v) = a.horizon {
        p.horizon = v;
    }
    if let Some(v) = a.sequences {
        p.sequences = v;
    }
    if let Some(v) = a.iterations {
        p.iterations = v;
    }
    if let Some(v) = a.temperature {
        p.temperature = v;
    }
    if let Some(v) = a.gamma {
        p.gamma = v;
    }
    if let Some(v) = a.noise_scale {
        p.noise_scale = v;
    }
    match a.warmstart {
        Some(WarmstartArg::Zeros) => p.warmstart = Warmstart::Zeros,
        Some(WarmstartArg::Expert) => p.warmstart = Warmstart::Expert { gain: a.warmstart_gain },
        None => {}
    }
    p.validate()?;
    let world = match (&a.world, &a.ckpt) {
        (Some(w), _) => read_config(Some(w))?,
        (None, Some(c)) => load_checkpoint(c)
            .with_context(|| format!("loading checkpoint {}", c.display()))?
            .world
            .context("checkpoint does not record its world; pass --world")?,
        (None, None) => WorldConfig::default(),
    };
    world.validate()?;
    // Reject bad instructions before any work is done.
    let vocab = world.vocab();
    for text in &a.instruction {
        vocab.parse(text)?;
    }
    if a.episodes == 0 {
        bail!("--episodes must be at least 1");
    }
    Ok(PlanRun {
        ckpt: a.ckpt.as_deref().map(absolute).transpose()?,
        world,
        instructions: a.instruction,
        policy: a.policy,
        episodes: a.episodes,
        planner: p,
        seed: a.seed,
        out: absolute(&a.out)?,
    })
}

fn eval_lcbc(a: EvalLcbcArgs) -> Result<EvalLcbcRun> {
    let mut bc: BcConfig = read_config(a.config.as_deref())?;
    if let Some(v) = a.hidden {
        bc.hidden = v;
    }
    if let Some(v) = a.lr {
        bc.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        bc.batch_size = v;
    }
    if let Some(v) = a.steps {
        bc.steps = v;
    }
    if let Some(v) = a.log_interval {
        bc.log_interval = v;
    }
    bc.seed = a.seed;
    bc.validate()?;
    if a.episodes == 0 {
        bail!("--episodes must be at least 1");
    }
    Ok(EvalLcbcRun {
        ckpt: absolute(&a.ckpt)?,
        demos: absolute(&a.demos)?,
        encoder: a.encoder,
        bc,
        episodes: a.episodes,
        seed: a.seed,
        out: absolute(&a.out)?,
        policy_out: a.policy_out.as_deref().map(absolute).transpose()?,
    })
}

fn run_replay(a: ReplayArgs) -> Result<()> {
    let manifest = RunManifest::load(&a.manifest)?;
    if let Some(seed) = a.seed.filter(|&s| s != manifest.seed) {
        bail!("manifest was recorded with seed {}, not {seed}", manifest.seed);
    }
    let outcomes = replay(&manifest)?;
    for o in &outcomes {
        println!("{} {}", if o.identical { "identical" } else { "DIFFERS" }, o.path);
    }
    if outcomes.iter().any(|o| !o.identical) {
        bail!("replay of {} did not reproduce its outputs", a.manifest.display());
    }
    Ok(())
}

fn dispatch(command: Command) -> Result<()> {
    let manifest = match command {
        Command::GenWorld(a) => record(gen_world(a)?)?,
        Command::Train(a) => record(train(a)?)?,
        Command::SamplingStats(a) => record(sampling(a)?)?,
        Command::RewardCurve(a) => record(reward_curve(a)?)?,
        Command::Heatmap(a) => record(heatmap(a)?)?,
        Command::FirstImageStats(a) => record(first_image(a)?)?,
        Command::Plan(a) => record(plan(a)?)?,
        Command::EvalLcbc(a) => record(eval_lcbc(a)?)?,
        Command::Replay(a) => return run_replay(a),
    };
    log::debug!("manifest at {}", manifest.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet {
        log::LevelFilter::Error
    } else if cli.verbose {
        log::LevelFilter::Debug
    } else {
        log::LevelFilter::Info
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
