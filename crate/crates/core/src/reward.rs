//! Analysis artifacts computed from trained encoders: per-frame reward
//! curves, segment-by-instruction heatmaps and first-frame clustering.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels;
use crate::encoders::{EncoderParams, Instruction, Vocabulary};
use crate::error::{Error, Result};
use crate::objectives::{segment_reward_potential, segment_reward_transition, Variant};
use crate::sampler::Segment;
use crate::world::{Dataset, Trajectory, WorldConfig};

/// Similarity of every frame to one instruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardCurve {
    pub instruction: Instruction,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl RewardCurve {
    /// Min-max normalizes `raw`; a constant curve maps to 0.5 everywhere.
    pub fn from_raw(instruction: Instruction, raw: Vec<f64>) -> Self {
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let normalized = if hi > lo {
            raw.iter().map(|x| (x - lo) / (hi - lo)).collect()
        } else {
            vec![0.5; raw.len()]
        };
        Self {
            instruction,
            raw,
            normalized,
        }
    }

    /// Spearman correlation between frame index and raw value.
    pub fn spearman(&self) -> f64 {
        let t: Vec<f64> = (0..self.raw.len()).map(|i| i as f64).collect();
        spearman(&t, &self.raw)
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let io = |e| Error::io("<curve stream>", e);
        writeln!(out, "frame,raw,normalized").map_err(io)?;
        for (t, (r, n)) in self.raw.iter().zip(&self.normalized).enumerate() {
            writeln!(out, "{},{},{}", t + 1, r, n).map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

fn embed_frames(params: &EncoderParams, traj: &Trajectory) -> Result<Vec<f64>> {
    if traj.obs_dim() != params.config.d_obs {
        return Err(Error::ShapeMismatch {
            op: "embed trajectory",
            left: vec![params.config.d_obs],
            right: vec![traj.obs_dim()],
        });
    }
    params.encode_observations(traj.observations().values(), traj.len())
}

/// Per-frame `S(φ(o_t), ψ(l))`.
/// Encoders can score `world`'s observations and instructions.
pub fn check_compatible(params: &EncoderParams, world: &WorldConfig) -> Result<()> {
    if params.config.d_obs != world.d_obs {
        return Err(Error::Incompatible(format!(
            "encoder expects {}-dimensional observations, data has {}",
            params.config.d_obs, world.d_obs
        )));
    }
    if params.config.vocab != world.vocab() {
        return Err(Error::Incompatible(format!(
            "encoder vocabulary {:?} differs from data vocabulary {:?}",
            params.config.vocab,
            world.vocab()
        )));
    }
    Ok(())
}

pub fn reward_curve(params: &EncoderParams, traj: &Trajectory, l: Instruction) -> Result<RewardCurve> {
    let phi = embed_frames(params, traj)?;
    let psi = params.encode_instruction(l)?;
    let k = psi.len();
    let raw = phi.chunks(k).map(|f| kernels::cosine(f, &psi)).collect();
    Ok(RewardCurve::from_raw(l, raw))
}

/// Which segment reward a heatmap cell holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardForm {
    /// `S(φ_goal, ψ) - S(φ_start, ψ)`.
    Potential,
    /// `S(φ_goal - φ_start, ψ)`.
    Transition,
}

impl RewardForm {
    /// P-checkpoints score segments by potential difference, everything else
    /// by transition direction.
    pub fn for_variant(variant: Variant) -> Self {
        match variant {
            Variant::P => RewardForm::Potential,
            _ => RewardForm::Transition,
        }
    }

    pub fn score(self, start: &[f64], goal: &[f64], psi: &[f64]) -> Result<f64> {
        match self {
            RewardForm::Potential => segment_reward_potential(start, goal, psi),
            RewardForm::Transition => segment_reward_transition(start, goal, psi),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapGrid {
    pub form: RewardForm,
    pub segments: Vec<Segment>,
    /// Instruction of each row's source trajectory.
    pub row_instructions: Vec<Instruction>,
    pub instructions: Vec<Instruction>,
    /// Row-major `segments x instructions`.
    pub values: Vec<f64>,
}

impl HeatmapGrid {
    pub fn rows(&self) -> usize {
        self.segments.len()
    }

    pub fn cols(&self) -> usize {
        self.instructions.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols()..(i + 1) * self.cols()]
    }

    pub fn cell(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols() + j]
    }

    /// Column of the row's own instruction, if it is among the columns.
    pub fn matched_column(&self, i: usize) -> Option<usize> {
        self.instructions.iter().position(|&l| l == self.row_instructions[i])
    }

    /// Fraction of rows whose matched cell beats every other cell strictly.
    pub fn diagonal_max_fraction(&self) -> f64 {
        let hits = (0..self.rows())
            .filter(|&i| match self.matched_column(i) {
                Some(j) => {
                    let d = self.cell(i, j);
                    self.row(i).iter().enumerate().all(|(c, &v)| c == j || v < d)
                }
                None => false,
            })
            .count();
        hits as f64 / self.rows() as f64
    }

    /// Fraction of rows whose mirror-instruction cell is negative, over rows
    /// that have a mirror column.
    pub fn mirror_negative_fraction(&self) -> f64 {
        let mut n = 0;
        let mut neg = 0;
        for i in 0..self.rows() {
            let mirror = self.row_instructions[i].mirror();
            if let Some(j) = self.instructions.iter().position(|&l| l == mirror) {
                n += 1;
                neg += (self.cell(i, j) < 0.0) as usize;
            }
        }
        if n == 0 {
            0.0
        } else {
            neg as f64 / n as f64
        }
    }

    pub fn write_csv(&self, vocab: &Vocabulary, mut out: impl Write) -> Result<()> {
        let io = |e| Error::io("<heatmap stream>", e);
        write!(out, "segment").map_err(io)?;
        for &l in &self.instructions {
            write!(out, ",{}", vocab.describe(l)).map_err(io)?;
        }
        writeln!(out).map_err(io)?;
        for i in 0..self.rows() {
            let s = &self.segments[i];
            write!(
                out,
                "{} #{} [{}-{}]",
                vocab.describe(self.row_instructions[i]),
                s.trajectory,
                s.start + 1,
                s.goal + 1
            )
            .map_err(io)?;
            for v in self.row(i) {
                write!(out, ",{v}").map_err(io)?;
            }
            writeln!(out).map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

/// Cell `(i, j)` is the reward of segment `i` under instruction `j`.
pub fn reward_heatmap(
    params: &EncoderParams,
    form: RewardForm,
    dataset: &Dataset,
    segments: &[Segment],
    instructions: &[Instruction],
) -> Result<HeatmapGrid> {
    if segments.is_empty() || instructions.is_empty() {
        return Err(Error::EmptyInput { op: "reward_heatmap" });
    }
    let psis = instructions
        .iter()
        .map(|&l| params.encode_instruction(l))
        .collect::<Result<Vec<_>>>()?;
    let mut values = Vec::with_capacity(segments.len() * instructions.len());
    let mut row_instructions = Vec::with_capacity(segments.len());
    for s in segments {
        let traj = dataset
            .trajectories
            .get(s.trajectory)
            .ok_or_else(|| Error::InvalidArgument(format!("segment refers to missing trajectory {}", s.trajectory)))?;
        Segment::new(s.trajectory, s.start, s.goal, traj.len())?;
        let start = params.encode_observation(traj.observation(s.start))?;
        let goal = params.encode_observation(traj.observation(s.goal))?;
        for psi in &psis {
            values.push(form.score(&start, &goal, psi)?);
        }
        row_instructions.push(traj.instruction());
    }
    Ok(HeatmapGrid {
        form,
        segments: segments.to_vec(),
        row_instructions,
        instructions: instructions.to_vec(),
        values,
    })
}

/// For each listed trajectory and each length `m` (where `m = 0` stands for
/// `h - 1`, the whole trajectory), one segment of that length at a random
/// start.
pub fn segments_of_lengths<R: Rng + ?Sized>(
    dataset: &Dataset,
    trajectories: &[usize],
    lengths: &[usize],
    rng: &mut R,
) -> Result<Vec<Segment>> {
    let mut out = Vec::new();
    for &i in trajectories {
        let h = dataset
            .trajectories
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("no trajectory {i}")))?
            .len();
        for &m in lengths {
            let m = if m == 0 { h - 1 } else { m };
            if m >= h {
                return Err(Error::InvalidArgument(format!("segment length {m} too long for h = {h}")));
            }
            let start = rng.random_range(0..h - m);
            out.push(Segment::new(i, start, start + m, h)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirstImageStats {
    pub trajectories: usize,
    /// Mean cosine over all unordered pairs of `φ(o_1)`.
    pub pairwise_mean: f64,
    /// Mean cosine of `φ(o_1)` to the average instruction embedding.
    pub to_mean_instruction: f64,
}

const STAT_TRAJECTORIES: usize = 100;

fn mean_pairwise_cosine(rows: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            total += kernels::cosine(&rows[i], &rows[j]);
            n += 1;
        }
    }
    total / n as f64
}

/// Clustering of first-frame embeddings over the first 100 trajectories
/// (or all, if fewer).
pub fn first_image_similarity_stats(params: &EncoderParams, dataset: &Dataset) -> Result<FirstImageStats> {
    if dataset.len() < 2 {
        return Err(Error::InvalidArgument("need at least two trajectories".into()));
    }
    let n = dataset.len().min(STAT_TRAJECTORIES);
    let phis = dataset.trajectories[..n]
        .iter()
        .map(|t| params.encode_observation(t.observation(0)))
        .collect::<Result<Vec<_>>>()?;
    let vocab = &params.config.vocab;
    let k = params.config.embed_dim;
    let mut psi_bar = vec![0.0; k];
    let all = vocab.instructions();
    for &l in &all {
        for (a, b) in psi_bar.iter_mut().zip(params.encode_instruction(l)?) {
            *a += b / all.len() as f64;
        }
    }
    let to_mean_instruction = phis.iter().map(|p| kernels::cosine(p, &psi_bar)).sum::<f64>() / n as f64;
    Ok(FirstImageStats {
        trajectories: n,
        pairwise_mean: mean_pairwise_cosine(&phis),
        to_mean_instruction,
    })
}

/// Same protocol as [`first_image_similarity_stats`] with one random
/// interior frame per trajectory in place of the first.
pub fn mid_frame_pairwise_mean<R: Rng + ?Sized>(params: &EncoderParams, dataset: &Dataset, rng: &mut R) -> Result<f64> {
    if dataset.len() < 2 {
        return Err(Error::InvalidArgument("need at least two trajectories".into()));
    }
    let n = dataset.len().min(STAT_TRAJECTORIES);
    let phis = dataset.trajectories[..n]
        .iter()
        .map(|t| {
            let h = t.len();
            let idx = if h > 2 { rng.random_range(1..h - 1) } else { h - 1 };
            params.encode_observation(t.observation(idx))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_pairwise_cosine(&phis))
}

/// Ranks with ties sharing their average rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::DenseArray;
    use crate::encoders::{init_params, EncoderConfig};
    use crate::world::{World, WorldConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn l() -> Instruction {
        Instruction { verb: 0, object: 2 }
    }

    #[test]
    fn normalization_examples() {
        let c = RewardCurve::from_raw(l(), vec![0.1, 0.2, 0.4]);
        let want = [0.0, 1.0 / 3.0, 1.0];
        assert!(c.normalized.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12));
        let flat = RewardCurve::from_raw(l(), vec![0.3; 4]);
        assert_eq!(flat.normalized, vec![0.5; 4]);
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 100.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), 0.0);
        // ties take the average rank: ranks (0, 1.5, 1.5, 3)
        let r = ranks(&[1.0, 2.0, 2.0, 3.0]);
        assert_eq!(r, vec![0.0, 1.5, 1.5, 3.0]);
    }

    #[test]
    fn zero_encoder_gives_zero_heatmap() {
        let world = World::new(WorldConfig::default()).unwrap();
        let ds = world.generate_dataset(4, 0).unwrap();
        let params = EncoderParams::zeros(EncoderConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let segs = segments_of_lengths(&ds, &[0, 1, 2, 3], &[2, 5, 10, 0], &mut rng).unwrap();
        for form in [RewardForm::Potential, RewardForm::Transition] {
            let grid = reward_heatmap(&params, form, &ds, &segs, &world.vocab().instructions()).unwrap();
            assert_eq!(grid.rows(), 16);
            assert!(grid.values.iter().all(|&v| v == 0.0));
        }
        assert!(reward_heatmap(&params, RewardForm::Transition, &ds, &[], &[l()]).is_err());
    }

    #[test]
    fn heatmap_cells_match_scalar_rewards_and_ranges() {
        let world = World::new(WorldConfig::default()).unwrap();
        let ds = world.generate_dataset(6, 2).unwrap();
        let params = init_params(&EncoderConfig::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let segs = segments_of_lengths(&ds, &[0, 1, 2], &[2, 0], &mut rng).unwrap();
        let ls = world.vocab().instructions();
        for (form, bound) in [(RewardForm::Potential, 2.0), (RewardForm::Transition, 1.0)] {
            let g = reward_heatmap(&params, form, &ds, &segs, &ls).unwrap();
            let again = reward_heatmap(&params, form, &ds, &segs, &ls).unwrap();
            assert_eq!(g, again);
            assert!(g.values.iter().all(|v| v.abs() <= bound + 1e-12));
            let s = segs[1];
            let t = &ds.trajectories[s.trajectory];
            let start = params.encode_observation(t.observation(s.start)).unwrap();
            let goal = params.encode_observation(t.observation(s.goal)).unwrap();
            let psi = params.encode_instruction(ls[3]).unwrap();
            assert_eq!(g.cell(1, 3), form.score(&start, &goal, &psi).unwrap());
            assert_eq!(g.segments[1].len(), t.len() - 1);
        }
    }

    #[test]
    fn grid_statistics() {
        let a = Instruction { verb: 0, object: 2 };
        let b = a.mirror();
        let s = Segment::new(0, 0, 1, 2).unwrap();
        let grid = HeatmapGrid {
            form: RewardForm::Transition,
            segments: vec![s, s],
            row_instructions: vec![a, b],
            instructions: vec![a, b],
            values: vec![0.9, -0.5, 0.2, 0.1],
        };
        assert_eq!(grid.diagonal_max_fraction(), 0.5);
        assert_eq!(grid.mirror_negative_fraction(), 0.5);
        let mut csv = Vec::new();
        grid.write_csv(&Vocabulary::new(4), &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("segment,open drawer,close drawer\n"));
    }

    #[test]
    fn identical_first_frames_cluster_perfectly() {
        let world = World::new(WorldConfig::default()).unwrap();
        let mut ds = world.generate_dataset(5, 0).unwrap();
        let first = ds.trajectories[0].observation(0).to_vec();
        for t in &mut ds.trajectories {
            let mut rows: Vec<Vec<f64>> = (0..t.len()).map(|i| t.observation(i).to_vec()).collect();
            rows[0] = first.clone();
            *t = Trajectory::new(t.instruction(), DenseArray::from_rows(&rows).unwrap(), None, None).unwrap();
        }
        let params = init_params(&EncoderConfig::default(), 1).unwrap();
        let stats = first_image_similarity_stats(&params, &ds).unwrap();
        assert!((stats.pairwise_mean - 1.0).abs() < 1e-12);
        assert_eq!(stats.trajectories, 5);
    }

    #[test]
    fn curve_rejects_wrong_width() {
        let params = init_params(&EncoderConfig::default(), 1).unwrap();
        let obs = DenseArray::matrix(3, 5, vec![0.0; 15]).unwrap();
        let t = Trajectory::new(l(), obs, None, None).unwrap();
        assert!(matches!(reward_curve(&params, &t, l()), Err(Error::ShapeMismatch { .. })));
    }
}
