//! Joint training of φ and ψ on sampled segments.

pub(crate) mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use optim::{Optimizer, OptimizerState};

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DenseArray, Graph, NodeId};
use crate::encoders::{init_params, EncoderConfig, EncoderHandle, EncoderParams};
use crate::error::{Error, Result};
use crate::objectives::{contrastive_loss_graph, logits_graph, BatchEmbeddings, ObjectiveSpec, Variant};
use crate::rng::derive_seed;
use crate::sampler::{sample_batch, SegmentBatch};
use crate::world::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub objective: ObjectiveSpec,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub weight_decay: f64,
    pub seed: u64,
    /// Snapshot every this many iterations; 0 disables snapshots.
    pub checkpoint_interval: usize,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveSpec::new(Variant::T),
            iterations: 2000,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            weight_decay: 0.0,
            seed: 0,
            checkpoint_interval: 0,
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            objective: ObjectiveSpec::new(variant),
            ..Self::default()
        }
    }

    /// The large-batch pretraining hyper-parameters: Adam at 1e-5, B = 1024,
    /// 20k iterations, weight decay 1e-3.
    pub fn large_scale(variant: Variant) -> Self {
        Self {
            iterations: 20_000,
            batch_size: 1024,
            learning_rate: 1e-5,
            weight_decay: 1e-3,
            ..Self::for_variant(variant)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid learning rate {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid weight decay {}", self.weight_decay)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Seed of the generator that draws the batch of iteration `iteration`.
pub fn batch_seed(seed: u64, iteration: usize) -> u64 {
    derive_seed(seed, iteration as u64)
}

/// Stacks frame `f` of every segment into a `B x d_obs` matrix, one per
/// embedded frame slot. FrameAlign draws its single frame uniformly from the
/// whole trajectory.
pub fn batch_observations<R: Rng + ?Sized>(
    dataset: &Dataset,
    batch: &SegmentBatch,
    variant: Variant,
    rng: &mut R,
) -> Result<Vec<DenseArray>> {
    let per_segment: Vec<Vec<usize>> = batch
        .segments
        .iter()
        .map(|s| {
            let h = dataset.trajectories[s.trajectory].len();
            let single = if variant == Variant::FrameAlign { rng.random_range(0..h) } else { s.goal };
            variant.frame_indices(s, single)
        })
        .collect();
    (0..variant.frames_per_segment())
        .map(|f| {
            let rows: Vec<&[f64]> = batch
                .segments
                .iter()
                .zip(&per_segment)
                .map(|(s, idx)| dataset.trajectories[s.trajectory].observation(idx[f]))
                .collect();
            DenseArray::from_rows(&rows)
        })
        .collect()
}

/// Everything one step needs from the tape.
pub struct BatchGraph {
    pub graph: Graph,
    pub handle: EncoderHandle,
    pub frames: Vec<NodeId>,
    pub instructions: NodeId,
    pub loss: NodeId,
}

/// Builds the encode-and-score graph of one batch.
pub fn build_batch_graph(
    params: &EncoderParams,
    objective: &ObjectiveSpec,
    observations: &[DenseArray],
    batch: &SegmentBatch,
) -> Result<BatchGraph> {
    let mut graph = Graph::new();
    let handle = params.register(&mut graph);
    let frames = observations
        .iter()
        .map(|o| {
            let x = graph.leaf(o.clone());
            handle.encode_observations(&mut graph, x)
        })
        .collect::<Result<Vec<_>>>()?;
    let instructions = handle.encode_instructions(&mut graph, &batch.instructions)?;
    let logits = logits_graph(&mut graph, objective.variant, &frames, instructions)?;
    let loss = contrastive_loss_graph(&mut graph, logits, objective.temperature)?;
    Ok(BatchGraph {
        graph,
        handle,
        frames,
        instructions,
        loss,
    })
}

impl BatchGraph {
    pub fn loss(&self) -> f64 {
        self.graph.value(self.loss).values()[0]
    }

    pub fn embeddings(&self) -> Result<BatchEmbeddings> {
        BatchEmbeddings::new(
            self.frames.iter().map(|&f| self.graph.value(f).clone()).collect(),
            self.graph.value(self.instructions).clone(),
        )
    }

    /// Gradients for every encoder tensor, in [`EncoderParams::tensors`] order.
    pub fn parameter_gradients(&self) -> Result<Vec<DenseArray>> {
        let mut grads = self.graph.backward(self.loss)?;
        Ok(self.handle.nodes().into_iter().map(|n| grads.take(n)).collect())
    }
}

fn check_dataset(config: &TrainConfig, dataset: &Dataset) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput { op: "train" });
    }
    let d_obs = dataset.trajectories[0].obs_dim();
    if d_obs != config.encoder.d_obs {
        return Err(Error::ShapeMismatch {
            op: "train (observation width)",
            left: vec![config.encoder.d_obs],
            right: vec![d_obs],
        });
    }
    let vocab = &config.encoder.vocab;
    dataset.trajectories.iter().try_for_each(|t| vocab.check(t.instruction()))
}

/// The encoder parameters a run with `config` starts from.
pub fn initial_params(config: &TrainConfig) -> Result<EncoderParams> {
    init_params(&config.encoder, derive_seed(config.seed, u64::MAX))
}

pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<Checkpoint> {
    train_with_snapshots(config, dataset, |_| Ok(()))
}

/// Runs training, handing a snapshot to `on_snapshot` every
/// `checkpoint_interval` iterations.
pub fn train_with_snapshots<F>(config: &TrainConfig, dataset: &Dataset, mut on_snapshot: F) -> Result<Checkpoint>
where
    F: FnMut(&Checkpoint) -> Result<()>,
{
    config.validate()?;
    check_dataset(config, dataset)?;
    let mut params = initial_params(config)?;
    let mut opt = OptimizerState::new(config.optimizer, &params.tensors());
    let mut metrics = Vec::with_capacity(config.iterations);
    let snapshot = |params: &EncoderParams, iteration: usize, metrics: &[MetricRecord]| Checkpoint {
        params: params.clone(),
        config: config.clone(),
        world: Some(dataset.world.clone()),
        iteration,
        metrics: metrics.to_vec(),
    };

    for iteration in 1..=config.iterations {
        let seed = batch_seed(config.seed, iteration);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = sample_batch(dataset, config.batch_size, &mut rng)?;
        let obs = batch_observations(dataset, &batch, config.objective.variant, &mut rng)?;
        let bg = build_batch_graph(&params, &config.objective, &obs, &batch)?;
        let loss = bg.loss();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration,
                batch_seed: seed,
            });
        }
        let grads = bg.parameter_gradients()?;
        let grad_norm = grads
            .iter()
            .flat_map(|g| g.values())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration,
                batch_seed: seed,
            });
        }
        opt.update(&mut params.tensors_mut(), &grads, config.learning_rate, config.weight_decay)?;
        metrics.push(MetricRecord {
            iteration,
            loss,
            grad_norm,
        });
        if iteration % 100 == 0 {
            log::debug!("iteration {iteration}: loss {loss:.5}, grad norm {grad_norm:.4}");
        }
        if config.checkpoint_interval > 0 && iteration % config.checkpoint_interval == 0 {
            on_snapshot(&snapshot(&params, iteration, &metrics))?;
        }
    }
    Ok(snapshot(&params, config.iterations, &metrics))
}

/// Writes `iteration,loss,grad_norm` rows with a header line.
pub fn write_metrics_csv(metrics: &[MetricRecord], mut out: impl Write) -> Result<()> {
    let io = |e| Error::io("<metrics stream>", e);
    writeln!(out, "iteration,loss,grad_norm").map_err(io)?;
    for m in metrics {
        writeln!(out, "{},{},{}", m.iteration, m.loss, m.grad_norm).map_err(io)?;
    }
    out.flush().map_err(io)
}
