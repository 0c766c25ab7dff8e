//! Trajectories and the line-delimited dataset file.
//!
//! Line 1 is a JSON header (`format`, `version`, `world`, `seed`, `count`);
//! every following line is one JSON trajectory record. Floats are written in
//! shortest round-trip form, so a write/read cycle is bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::WorldConfig;
use crate::autodiff::DenseArray;
use crate::encoders::Instruction;
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;
const DATASET_FORMAT: &str = "decisionnce-dataset";

/// A video `(o_1, ..., o_h; l)` with optional expert actions and
/// ground-truth progression.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    instruction: Instruction,
    observations: DenseArray,
    actions: Option<DenseArray>,
    progression: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn new(
        instruction: Instruction,
        observations: DenseArray,
        actions: Option<DenseArray>,
        progression: Option<Vec<f64>>,
    ) -> Result<Self> {
        let (h, _) = observations.dims2().ok_or_else(|| Error::ShapeMismatch {
            op: "Trajectory::new",
            left: vec![0, 0],
            right: observations.shape().to_vec(),
        })?;
        if h < 2 {
            return Err(Error::TrajectoryTooShort(h));
        }
        if let Some(a) = &actions {
            if a.dims2().map(|(n, _)| n) != Some(h - 1) {
                return Err(Error::ShapeMismatch {
                    op: "Trajectory::new (actions)",
                    left: vec![h - 1],
                    right: a.shape().to_vec(),
                });
            }
        }
        if let Some(z) = &progression {
            if z.len() != h {
                return Err(Error::ShapeMismatch {
                    op: "Trajectory::new (progression)",
                    left: vec![h],
                    right: vec![z.len()],
                });
            }
        }
        Ok(Self {
            instruction,
            observations,
            actions,
            progression,
        })
    }

    /// Number of frames `h`.
    pub fn len(&self) -> usize {
        self.observations.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn obs_dim(&self) -> usize {
        self.observations.shape()[1]
    }

    pub fn instruction(&self) -> Instruction {
        self.instruction
    }

    pub fn observations(&self) -> &DenseArray {
        &self.observations
    }

    /// Frame `t` (0-based).
    pub fn observation(&self, t: usize) -> &[f64] {
        self.observations.row(t)
    }

    pub fn actions(&self) -> Option<&DenseArray> {
        self.actions.as_ref()
    }

    pub fn progression(&self) -> Option<&[f64]> {
        self.progression.as_deref()
    }
}

/// Trajectories plus the world they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub world: WorldConfig,
    /// Sampling seed the trajectories were generated with.
    pub seed: u64,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    world: WorldConfig,
    seed: u64,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    verb: usize,
    object: usize,
    h: usize,
    d_obs: usize,
    observations: Vec<f64>,
    d_act: Option<usize>,
    actions: Option<Vec<f64>>,
    progression: Option<Vec<f64>>,
}

pub fn write_dataset(ds: &Dataset, mut out: impl Write) -> Result<()> {
    let header = Header {
        format: DATASET_FORMAT.into(),
        version: DATASET_FORMAT_VERSION,
        world: ds.world.clone(),
        seed: ds.seed,
        count: ds.trajectories.len(),
    };
    let io = |e| Error::io("<dataset stream>", e);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n").map_err(io)?;
    for t in &ds.trajectories {
        let rec = Record {
            verb: t.instruction.verb,
            object: t.instruction.object,
            h: t.len(),
            d_obs: t.obs_dim(),
            observations: t.observations.values().to_vec(),
            d_act: t.actions.as_ref().map(|a| a.shape()[1]),
            actions: t.actions.as_ref().map(|a| a.values().to_vec()),
            progression: t.progression.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_dataset(input: impl BufRead) -> Result<Dataset> {
    let mut lines = input.lines();
    let io = |e| Error::io("<dataset stream>", e);
    let first = lines
        .next()
        .ok_or_else(|| Error::Format("empty dataset file".into()))?
        .map_err(io)?;
    let header: Header = serde_json::from_str(&first)?;
    if header.format != DATASET_FORMAT {
        return Err(Error::Format(format!("not a dataset file (format {:?})", header.format)));
    }
    if header.version != DATASET_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: header.version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let vocab = header.world.vocab();
    let mut trajectories = Vec::with_capacity(header.count);
    for line in lines {
        let line = line.map_err(io)?;
        if line.is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)?;
        let instruction = Instruction {
            verb: rec.verb,
            object: rec.object,
        };
        vocab.check(instruction)?;
        let observations = DenseArray::matrix(rec.h, rec.d_obs, rec.observations)?;
        let actions = match (rec.d_act, rec.actions) {
            (Some(d), Some(a)) => Some(DenseArray::matrix(rec.h - 1, d, a)?),
            (None, None) => None,
            _ => return Err(Error::Format("actions and d_act must be given together".into())),
        };
        trajectories.push(Trajectory::new(instruction, observations, actions, rec.progression)?);
    }
    if trajectories.len() != header.count {
        return Err(Error::Format(format!(
            "header announces {} trajectories, found {}",
            header.count,
            trajectories.len()
        )));
    }
    Ok(Dataset {
        world: header.world,
        seed: header.seed,
        trajectories,
    })
}

impl Dataset {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        write_dataset(self, BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        read_dataset(BufReader::new(file))
    }
}
