//! Random segment sampling and its goal-selection statistics.
//!
//! Training draws a start frame uniformly from every frame that has a
//! successor and a goal uniformly from the frames after it. Later frames are
//! therefore picked as goals more often; [`goal_probability`] gives the
//! closed form for the raw process in which the start may also be the last
//! frame (and then no goal is drawn).

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::encoders::Instruction;
use crate::error::{Error, Result};
use crate::world::{Dataset, Trajectory};

/// Endpoints of a segment of trajectory `trajectory`. Indices are 0-based
/// frame positions with `start < goal`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub trajectory: usize,
    pub start: usize,
    pub goal: usize,
}

impl Segment {
    pub fn new(trajectory: usize, start: usize, goal: usize, h: usize) -> Result<Self> {
        if start >= goal || goal >= h {
            return Err(Error::InvalidArgument(format!(
                "segment [{start}, {goal}] invalid for trajectory of length {h}"
            )));
        }
        Ok(Self {
            trajectory,
            start,
            goal,
        })
    }

    /// Segment length `m`.
    pub fn len(&self) -> usize {
        self.goal - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// The `k + 1` evenly spaced frames `start + ⌊m·i/k⌋`, `i = 0..=k`.
    pub fn keyframes(&self, k: usize) -> Vec<usize> {
        let m = self.len();
        (0..=k).map(|i| self.start + m * i / k).collect()
    }
}

/// One segment per batch slot, with the instruction of its trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentBatch {
    pub segments: Vec<Segment>,
    pub instructions: Vec<Instruction>,
}

impl SegmentBatch {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// Start uniform over all frames but the last, goal uniform over the frames
/// after it.
pub fn sample_segment<R: Rng + ?Sized>(index: usize, traj: &Trajectory, rng: &mut R) -> Result<Segment> {
    let h = traj.len();
    let (start, goal) = sample_endpoints(h, rng)?;
    Ok(Segment {
        trajectory: index,
        start,
        goal,
    })
}

pub fn sample_endpoints<R: Rng + ?Sized>(h: usize, rng: &mut R) -> Result<(usize, usize)> {
    if h < 2 {
        return Err(Error::TrajectoryTooShort(h));
    }
    let start = rng.random_range(0..h - 1);
    let goal = rng.random_range(start + 1..h);
    Ok((start, goal))
}

/// `B` trajectories drawn uniformly with replacement, one segment each.
pub fn sample_batch<R: Rng + ?Sized>(dataset: &Dataset, batch_size: usize, rng: &mut R) -> Result<SegmentBatch> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput { op: "sample_batch" });
    }
    if batch_size < 2 {
        return Err(Error::BatchTooSmall(batch_size));
    }
    let mut segments = Vec::with_capacity(batch_size);
    let mut instructions = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let i = rng.random_range(0..dataset.len());
        let traj = &dataset.trajectories[i];
        segments.push(sample_segment(i, traj, rng)?);
        instructions.push(traj.instruction());
    }
    Ok(SegmentBatch {
        segments,
        instructions,
    })
}

/// Probability that frame `t` (1-based) is drawn as a goal when the start is
/// uniform over all `h` frames: `(1/h) Σ_{i<t} 1/(h-i)`.
pub fn goal_probability(h: usize, t: usize) -> Result<f64> {
    if h < 2 {
        return Err(Error::TrajectoryTooShort(h));
    }
    if t == 0 || t > h {
        return Err(Error::InvalidArgument(format!("time stamp {t} outside 1..={h}")));
    }
    // fold from +0 so t = 1 prints as 0, not -0
    let s = (1..t).fold(0.0, |acc, i| acc + 1.0 / (h - i) as f64);
    Ok(s / h as f64)
}

/// Tally of simulated goal draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalHistogram {
    pub h: usize,
    pub samples: u64,
    /// `counts[t - 1]`: draws whose goal was frame `t`.
    pub counts: Vec<u64>,
    /// Draws whose start was the last frame.
    pub no_goal: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

impl GoalHistogram {
    pub fn frequencies(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64 / self.samples as f64).collect()
    }

    pub fn no_goal_frequency(&self) -> f64 {
        self.no_goal as f64 / self.samples as f64
    }

    pub fn analytic(&self) -> Vec<f64> {
        (1..=self.h).map(|t| goal_probability(self.h, t).unwrap()).collect()
    }

    pub fn max_abs_deviation(&self) -> f64 {
        self.frequencies()
            .iter()
            .zip(self.analytic())
            .map(|(f, p)| (f - p).abs())
            .fold(0.0, f64::max)
    }

    /// Pearson goodness of fit against the analytic distribution over the
    /// cells with positive probability (frames `2..=h` and "no goal").
    pub fn chi_square(&self) -> ChiSquareTest {
        let n = self.samples as f64;
        let mut cells: Vec<(f64, f64)> = self.analytic()[1..]
            .iter()
            .zip(&self.counts[1..])
            .map(|(&p, &c)| (c as f64, p * n))
            .collect();
        cells.push((self.no_goal as f64, n / self.h as f64));
        let statistic = cells.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
        let dof = cells.len() - 1;
        let p_value = ChiSquared::new(dof as f64).map(|d| d.sf(statistic)).unwrap_or(f64::NAN);
        ChiSquareTest {
            statistic,
            dof,
            p_value,
        }
    }
}

/// Simulates the raw process: start uniform over all `h` frames, goal
/// uniform over the later frames, "no goal" when the start is the last frame.
pub fn empirical_goal_histogram<R: Rng + ?Sized>(h: usize, n_samples: u64, rng: &mut R) -> Result<GoalHistogram> {
    if h < 2 {
        return Err(Error::TrajectoryTooShort(h));
    }
    if n_samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let mut counts = vec![0u64; h];
    let mut no_goal = 0;
    for _ in 0..n_samples {
        let start = rng.random_range(0..h);
        if start == h - 1 {
            no_goal += 1;
        } else {
            counts[rng.random_range(start + 1..h)] += 1;
        }
    }
    Ok(GoalHistogram {
        h,
        samples: n_samples,
        counts,
        no_goal,
    })
}
