//! Binary checkpoint file.
//!
//! Layout: the 8-byte magic `DNCECKPT`, a `u32` version, a `u64`-length JSON
//! metadata block, a `u32` tensor count, each tensor's rank (`u32`) and dims
//! (`u64` each), then every tensor's values as little-endian `f64`. All
//! integers are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MetricRecord, TrainConfig};
use crate::autodiff::DenseArray;
use crate::encoders::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::world::WorldConfig;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DNCECKPT";
const MAX_RANK: u32 = 8;

/// Trained encoders plus what produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub config: TrainConfig,
    /// World the training data came from, when known.
    pub world: Option<WorldConfig>,
    pub iteration: usize,
    pub metrics: Vec<MetricRecord>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    encoder: EncoderConfig,
    config: TrainConfig,
    world: Option<WorldConfig>,
    iteration: usize,
    metrics: Vec<MetricRecord>,
}

pub fn write_checkpoint(ckpt: &Checkpoint, out: impl Write) -> Result<()> {
    let meta = serde_json::to_vec(&Meta {
        encoder: ckpt.params.config.clone(),
        config: ckpt.config.clone(),
        world: ckpt.world.clone(),
        iteration: ckpt.iteration,
        metrics: ckpt.metrics.clone(),
    })?;
    write_tensor_file(MAGIC, &meta, &ckpt.params.tensors(), out)
}

/// Writes the shared container: magic, version, metadata, tensor block.
pub(crate) fn write_tensor_file(magic: &[u8; 8], meta: &[u8], tensors: &[&DenseArray], mut out: impl Write) -> Result<()> {
    let io = |e| Error::io("<checkpoint stream>", e);
    out.write_all(magic).map_err(io)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    out.write_all(&(meta.len() as u64).to_le_bytes()).map_err(io)?;
    out.write_all(meta).map_err(io)?;
    out.write_all(&(tensors.len() as u32).to_le_bytes()).map_err(io)?;
    for t in tensors {
        out.write_all(&(t.rank() as u32).to_le_bytes()).map_err(io)?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
    }
    for t in tensors {
        for v in t.values() {
            out.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        (&mut self.inner)
            .take(n as u64)
            .read_to_end(&mut buf)
            .map_err(|e| Error::io("<checkpoint stream>", e))?;
        if buf.len() != n {
            return Err(Error::Format(format!("checkpoint truncated while reading {what}")));
        }
        Ok(buf)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.bytes(N, what)?.try_into().expect("length checked"))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }
}

pub fn read_checkpoint(input: impl Read) -> Result<Checkpoint> {
    let (meta, tensors) = read_tensor_file(MAGIC, input)?;
    let meta: Meta = serde_json::from_slice(&meta)?;
    Ok(Checkpoint {
        params: EncoderParams::from_tensors(meta.encoder, tensors)?,
        config: meta.config,
        world: meta.world,
        iteration: meta.iteration,
        metrics: meta.metrics,
    })
}

/// Reads the shared container, returning the raw metadata and tensors.
pub(crate) fn read_tensor_file(magic: &[u8; 8], input: impl Read) -> Result<(Vec<u8>, Vec<DenseArray>)> {
    let mut r = Reader { inner: input };
    if &r.array::<8>("magic")? != magic {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let meta_len = r.u64("metadata length")?;
    let meta_len = usize::try_from(meta_len).map_err(|_| Error::Format("metadata length overflows".into()))?;
    let meta = r.bytes(meta_len, "metadata")?;
    let count = r.u32("tensor count")?;
    let mut shapes = Vec::new();
    for _ in 0..count {
        let rank = r.u32("tensor rank")?;
        if rank > MAX_RANK {
            return Err(Error::Format(format!("implausible tensor rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u64("tensor dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        shapes.push(shape);
    }
    let mut tensors = Vec::with_capacity(shapes.len());
    for shape in shapes {
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
        let raw = r.bytes(n.checked_mul(8).ok_or_else(|| Error::Format("tensor size overflows".into()))?, "tensor values")?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        tensors.push(DenseArray::new(shape, values)?);
    }
    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest).map_err(|e| Error::io("<checkpoint stream>", e))? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok((meta, tensors))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(ckpt, BufWriter::new(file))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}
