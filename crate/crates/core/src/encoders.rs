//! Vision encoder φ (observations to embeddings) and language encoder ψ
//! (instructions to embeddings), both landing in the same `K`-dimensional
//! space.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DenseArray, Graph, MlpHandle, NodeId};
use crate::error::{Error, Result};

pub use crate::autodiff::{mlp_apply, MlpParams};

/// Two verbs (forward and mirrored) times `n_objects` objects.
pub const N_VERBS: usize = 2;
const VERB_NAMES: [&str; N_VERBS] = ["open", "close"];
const OBJECT_NAMES: [&str; 8] = ["drawer", "door", "microwave", "cabinet", "light", "stove", "tap", "window"];

/// Token vocabulary: verb tokens first, then object tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub n_objects: usize,
}

impl Vocabulary {
    pub fn new(n_objects: usize) -> Self {
        Self { n_objects }
    }

    pub fn size(&self) -> usize {
        N_VERBS + self.n_objects
    }

    pub fn n_instructions(&self) -> usize {
        N_VERBS * self.n_objects
    }

    /// Every instruction, ordered by task id.
    pub fn instructions(&self) -> Vec<Instruction> {
        (0..self.n_instructions()).map(|t| self.instruction_for_task(t)).collect()
    }

    /// Task `t` is object `t / 2` with verb `t % 2`; verb 1 mirrors verb 0.
    pub fn instruction_for_task(&self, task: usize) -> Instruction {
        Instruction {
            verb: task % N_VERBS,
            object: N_VERBS + task / N_VERBS,
        }
    }

    pub fn task_of(&self, l: Instruction) -> Result<usize> {
        self.check(l)?;
        Ok((l.object - N_VERBS) * N_VERBS + l.verb)
    }

    pub fn check(&self, l: Instruction) -> Result<()> {
        if l.verb >= N_VERBS {
            return Err(Error::UnknownToken {
                id: l.verb,
                vocab: N_VERBS,
            });
        }
        if l.object < N_VERBS || l.object >= self.size() {
            return Err(Error::UnknownToken {
                id: l.object,
                vocab: self.size(),
            });
        }
        Ok(())
    }

    pub fn object_name(&self, object_token: usize) -> String {
        let idx = object_token - N_VERBS;
        let base = OBJECT_NAMES[idx % OBJECT_NAMES.len()];
        match idx / OBJECT_NAMES.len() {
            0 => base.to_string(),
            k => format!("{base}{k}"),
        }
    }

    pub fn describe(&self, l: Instruction) -> String {
        format!("{} {}", VERB_NAMES[l.verb], self.object_name(l.object))
    }

    /// Parses `"<verb> <object>"`, e.g. `"open drawer"`.
    pub fn parse(&self, text: &str) -> Result<Instruction> {
        let mut words = text.split_whitespace();
        let (Some(verb), Some(object), None) = (words.next(), words.next(), words.next()) else {
            return Err(Error::InvalidArgument(format!("instruction {text:?} must be '<verb> <object>'")));
        };
        let verb = VERB_NAMES
            .iter()
            .position(|v| *v == verb)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown verb {verb:?}")))?;
        let object = (N_VERBS..self.size())
            .find(|&tok| self.object_name(tok) == object)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown object {object:?}")))?;
        Ok(Instruction { verb, object })
    }
}

/// An instruction `l` as a (verb token, object token) pair. Mirror
/// instructions share the object token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub verb: usize,
    pub object: usize,
}

impl Instruction {
    pub fn mirror(self) -> Self {
        Self {
            verb: 1 - self.verb,
            object: self.object,
        }
    }
}

/// Layer sizes for both encoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_obs: usize,
    pub embed_dim: usize,
    pub vision_hidden: Vec<usize>,
    pub token_dim: usize,
    pub language_hidden: Vec<usize>,
    pub vocab: Vocabulary,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_obs: 32,
            embed_dim: 32,
            vision_hidden: vec![128, 128],
            token_dim: 32,
            language_hidden: vec![64],
            vocab: Vocabulary::new(4),
        }
    }
}

impl EncoderConfig {
    pub fn vision_widths(&self) -> Vec<usize> {
        let mut w = vec![self.d_obs];
        w.extend(&self.vision_hidden);
        w.push(self.embed_dim);
        w
    }

    pub fn language_widths(&self) -> Vec<usize> {
        let mut w = vec![self.token_dim];
        w.extend(&self.language_hidden);
        w.push(self.embed_dim);
        w
    }

    fn validate(&self) -> Result<()> {
        let all = [self.d_obs, self.embed_dim, self.token_dim, self.vocab.n_objects];
        if all.iter().chain(&self.vision_hidden).chain(&self.language_hidden).any(|&w| w == 0) {
            return Err(Error::InvalidArgument(format!("encoder widths must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// ψ's parameters: a token embedding table and a projection network.
#[derive(Clone, Debug, PartialEq)]
pub struct InstructionEncoderParams {
    pub table: DenseArray,
    pub projection: MlpParams,
}

impl InstructionEncoderParams {
    pub fn new(table: DenseArray, projection: MlpParams) -> Result<Self> {
        match table.dims2() {
            Some((_, k)) if k == projection.input_width() => Ok(Self { table, projection }),
            _ => Err(Error::ShapeMismatch {
                op: "InstructionEncoderParams::new",
                left: table.shape().to_vec(),
                right: vec![projection.input_width()],
            }),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.table.shape()[0]
    }

    /// Mean of the two token rows, before projection.
    fn token_mean(&self, l: Instruction) -> Result<Vec<f64>> {
        let vocab = self.vocab_size();
        for id in [l.verb, l.object] {
            if id >= vocab {
                return Err(Error::UnknownToken { id, vocab });
            }
        }
        let (a, b) = (self.table.row(l.verb), self.table.row(l.object));
        Ok(a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect())
    }

    pub fn tensors(&self) -> Vec<&DenseArray> {
        let mut t = vec![&self.table];
        t.extend(self.projection.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DenseArray> {
        let mut t = vec![&mut self.table];
        t.extend(self.projection.tensors_mut());
        t
    }
}

/// φ and ψ together.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub vision: MlpParams,
    pub language: InstructionEncoderParams,
}

impl EncoderParams {
    pub fn tensors(&self) -> Vec<&DenseArray> {
        let mut t = self.vision.tensors();
        t.extend(self.language.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DenseArray> {
        let mut t = self.vision.tensors_mut();
        t.extend(self.language.tensors_mut());
        t
    }

    pub fn from_tensors(config: EncoderConfig, tensors: Vec<DenseArray>) -> Result<Self> {
        let n_vision = 2 * (config.vision_widths().len() - 1);
        if tensors.len() != n_vision + 1 + 2 * (config.language_widths().len() - 1) {
            return Err(Error::Format(format!("unexpected encoder tensor count {}", tensors.len())));
        }
        let mut it = tensors.into_iter();
        let vision = MlpParams::from_tensors(config.vision_widths(), it.by_ref().take(n_vision).collect())?;
        let table = it.next().unwrap();
        if table.shape() != [config.vocab.size(), config.token_dim] {
            return Err(Error::ShapeMismatch {
                op: "EncoderParams::from_tensors",
                left: vec![config.vocab.size(), config.token_dim],
                right: table.shape().to_vec(),
            });
        }
        let projection = MlpParams::from_tensors(config.language_widths(), it.collect())?;
        Ok(Self {
            vision,
            language: InstructionEncoderParams::new(table, projection)?,
            config,
        })
    }

    /// All-zero parameters with the configured shapes.
    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            vision: MlpParams::zeros(config.vision_widths())?,
            language: InstructionEncoderParams::new(
                DenseArray::zeros(&[config.vocab.size(), config.token_dim]),
                MlpParams::zeros(config.language_widths())?,
            )?,
            config,
        })
    }

    pub fn encode_observation(&self, obs: &[f64]) -> Result<Vec<f64>> {
        encode_observation(&self.vision, obs)
    }

    pub fn encode_instruction(&self, l: Instruction) -> Result<Vec<f64>> {
        encode_instruction(&self.language, l)
    }

    /// Encodes `n` stacked observations at once.
    pub fn encode_observations(&self, rows: &[f64], n: usize) -> Result<Vec<f64>> {
        if rows.len() != n * self.vision.input_width() {
            return Err(Error::ShapeMismatch {
                op: "encode_observations",
                left: vec![n, self.vision.input_width()],
                right: vec![rows.len()],
            });
        }
        Ok(self.vision.forward_rows(rows, n))
    }

    pub fn register(&self, graph: &mut Graph) -> EncoderHandle {
        EncoderHandle {
            vision: self.vision.register(graph),
            table: graph.leaf(self.language.table.clone()),
            projection: self.language.projection.register(graph),
        }
    }
}

/// Draws fresh encoder parameters: weights ~ N(0, 1/fan_in), zero biases,
/// token embeddings ~ N(0, 1).
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vision = MlpParams::init(config.vision_widths(), &mut rng)?;
    let vocab = config.vocab.size();
    let table: Vec<f64> = (0..vocab * config.token_dim).map(|_| rng.sample(StandardNormal)).collect();
    let table = DenseArray::matrix(vocab, config.token_dim, table)?;
    let projection = MlpParams::init(config.language_widths(), &mut rng)?;
    Ok(EncoderParams {
        config: config.clone(),
        vision,
        language: InstructionEncoderParams::new(table, projection)?,
    })
}

/// φ(o): the raw (unnormalised) vision embedding.
pub fn encode_observation(params: &MlpParams, obs: &[f64]) -> Result<Vec<f64>> {
    if obs.len() != params.input_width() {
        return Err(Error::ShapeMismatch {
            op: "encode_observation",
            left: vec![params.input_width()],
            right: vec![obs.len()],
        });
    }
    Ok(params.forward_rows(obs, 1))
}

/// ψ(l): projection of the mean of the verb and object token embeddings.
pub fn encode_instruction(params: &InstructionEncoderParams, l: Instruction) -> Result<Vec<f64>> {
    let mean = params.token_mean(l)?;
    Ok(params.projection.forward_rows(&mean, 1))
}

/// Graph-side handle of [`EncoderParams`].
#[derive(Clone, Debug)]
pub struct EncoderHandle {
    pub vision: MlpHandle,
    pub table: NodeId,
    pub projection: MlpHandle,
}

impl EncoderHandle {
    /// Node ids in the same order as [`EncoderParams::tensors`].
    pub fn nodes(&self) -> Vec<NodeId> {
        let mut n = self.vision.nodes();
        n.push(self.table);
        n.extend(self.projection.nodes());
        n
    }

    /// φ over a stacked observation node (`n x d_obs`).
    pub fn encode_observations(&self, graph: &mut Graph, obs: NodeId) -> Result<NodeId> {
        self.vision.forward(graph, obs)
    }

    /// ψ over a batch of instructions, giving a `B x K` node.
    pub fn encode_instructions(&self, graph: &mut Graph, ls: &[Instruction]) -> Result<NodeId> {
        let vocab = graph.value(self.table).shape()[0];
        for l in ls {
            for id in [l.verb, l.object] {
                if id >= vocab {
                    return Err(Error::UnknownToken { id, vocab });
                }
            }
        }
        let verbs: Vec<usize> = ls.iter().map(|l| l.verb).collect();
        let objects: Vec<usize> = ls.iter().map(|l| l.object).collect();
        let v = graph.gather_rows(self.table, &verbs)?;
        let o = graph.gather_rows(self.table, &objects)?;
        let sum = graph.add(v, o)?;
        let mean = graph.scale(sum, 0.5);
        self.projection.forward(graph, mean)
    }
}
