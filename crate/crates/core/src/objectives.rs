//! Rewards, Bradley-Terry preference probability and the batch contrastive
//! losses.
//!
//! Every loss is built from a `B x B` logit matrix `M` whose row `a` is a
//! segment and column `b` an instruction. The loss is
//! `(1/B) Σ_i [lse(M[:, i]) - M_ii + lse(M[i, :]) - M_ii]`: the first term
//! contrasts instruction `i` against every segment in the batch, the second
//! contrasts segment `i` against every instruction.

use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, DenseArray, Graph, NodeId};
use crate::error::{Error, Result};
use crate::sampler::Segment;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Start/goal similarity difference against the instruction.
    #[serde(rename = "P")]
    P,
    /// Start-to-goal displacement against the instruction.
    #[serde(rename = "T")]
    T,
    /// Sum over four evenly spaced sub-transitions.
    #[serde(rename = "T4")]
    T4,
    #[serde(rename = "T8")]
    T8,
    /// Single frame against the instruction.
    #[serde(rename = "frame-align")]
    FrameAlign,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::P, Variant::T, Variant::T4, Variant::T8, Variant::FrameAlign];

    /// Embeddings consumed per segment.
    pub fn frames_per_segment(self) -> usize {
        match self {
            Variant::P | Variant::T => 2,
            Variant::T4 => 5,
            Variant::T8 => 9,
            Variant::FrameAlign => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::P => "P",
            Variant::T => "T",
            Variant::T4 => "T4",
            Variant::T8 => "T8",
            Variant::FrameAlign => "frame-align",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown objective variant {s:?}")))
    }

    /// Frame indices of a segment the variant embeds. `single` is the frame
    /// used by [`Variant::FrameAlign`].
    pub fn frame_indices(self, segment: &Segment, single: usize) -> Vec<usize> {
        match self {
            Variant::P | Variant::T => vec![segment.start, segment.goal],
            Variant::T4 => segment.keyframes(4),
            Variant::T8 => segment.keyframes(8),
            Variant::FrameAlign => vec![single],
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub variant: Variant,
    /// Logits are divided by this before the softmax. Left at 1 for the
    /// reference configuration.
    #[serde(default = "one")]
    pub temperature: f64,
}

fn one() -> f64 {
    1.0
}

impl ObjectiveSpec {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            temperature: 1.0,
        }
    }
}

/// Precomputed embeddings of one batch. `frames[f]` is the `B x K` matrix of
/// the `f`-th embedded frame of every segment (start first, goal last).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchEmbeddings {
    pub frames: Vec<DenseArray>,
    pub instructions: DenseArray,
}

impl BatchEmbeddings {
    pub fn new(frames: Vec<DenseArray>, instructions: DenseArray) -> Result<Self> {
        let (b, k) = instructions.dims2().ok_or_else(|| Error::ShapeMismatch {
            op: "BatchEmbeddings",
            left: vec![0, 0],
            right: instructions.shape().to_vec(),
        })?;
        if b < 2 {
            return Err(Error::BatchTooSmall(b));
        }
        if frames.is_empty() {
            return Err(Error::EmptyInput { op: "BatchEmbeddings" });
        }
        for f in &frames {
            if f.shape() != [b, k] {
                return Err(Error::ShapeMismatch {
                    op: "BatchEmbeddings",
                    left: vec![b, k],
                    right: f.shape().to_vec(),
                });
            }
        }
        Ok(Self { frames, instructions })
    }

    pub fn batch_size(&self) -> usize {
        self.instructions.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.instructions.shape()[1]
    }
}

/// `exp(r⁺) / (exp(r⁺) + exp(r⁻))` as a stable sigmoid of the difference.
pub fn bt_probability(reward_pos: f64, reward_neg: f64) -> f64 {
    let d = reward_pos - reward_neg;
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

fn check_dims(op: &'static str, vs: &[&[f64]]) -> Result<()> {
    let k = vs[0].len();
    if k == 0 {
        return Err(Error::EmptyInput { op });
    }
    match vs.iter().find(|v| v.len() != k) {
        Some(v) => Err(Error::ShapeMismatch {
            op,
            left: vec![k],
            right: vec![v.len()],
        }),
        None => Ok(()),
    }
}

/// `S(φ_next, ψ) - S(φ_t, ψ)`.
pub fn potential_step_reward(phi_t: &[f64], phi_next: &[f64], psi: &[f64]) -> Result<f64> {
    check_dims("potential_step_reward", &[phi_t, phi_next, psi])?;
    Ok(kernels::cosine(phi_next, psi) - kernels::cosine(phi_t, psi))
}

/// Total potential reward of a segment; only the endpoints matter.
pub fn segment_reward_potential(phi_start: &[f64], phi_goal: &[f64], psi: &[f64]) -> Result<f64> {
    potential_step_reward(phi_start, phi_goal, psi)
}

/// `S(φ_goal - φ_start, ψ)`.
pub fn segment_reward_transition(phi_start: &[f64], phi_goal: &[f64], psi: &[f64]) -> Result<f64> {
    check_dims("segment_reward_transition", &[phi_start, phi_goal, psi])?;
    let d: Vec<f64> = phi_goal.iter().zip(phi_start).map(|(g, s)| g - s).collect();
    Ok(kernels::cosine(&d, psi))
}

/// `Σ_i S(f_i - f_{i-1}, ψ)` over `k + 1` keyframe embeddings.
pub fn multiframe_transition_reward(frames: &[&[f64]], psi: &[f64], k: usize) -> Result<f64> {
    if k == 0 || frames.len() != k + 1 {
        return Err(Error::InvalidArgument(format!(
            "expected {} keyframes for k = {k}, got {}",
            k + 1,
            frames.len()
        )));
    }
    frames
        .windows(2)
        .map(|w| segment_reward_transition(w[0], w[1], psi))
        .sum()
}

fn check_frames(variant: Variant, n: usize) -> Result<()> {
    if n != variant.frames_per_segment() {
        return Err(Error::InvalidArgument(format!(
            "variant {variant} needs {} frame embeddings per segment, got {n}",
            variant.frames_per_segment()
        )));
    }
    Ok(())
}

/// Logit matrix on the tape.
pub fn logits_graph(graph: &mut Graph, variant: Variant, frames: &[NodeId], psi: NodeId) -> Result<NodeId> {
    check_frames(variant, frames.len())?;
    match variant {
        Variant::P => {
            let goal = graph.cosine_matrix(frames[1], psi)?;
            let start = graph.cosine_matrix(frames[0], psi)?;
            graph.sub(goal, start)
        }
        Variant::FrameAlign => graph.cosine_matrix(frames[0], psi),
        Variant::T | Variant::T4 | Variant::T8 => {
            let mut total = None;
            for w in frames.windows(2) {
                let d = graph.sub(w[1], w[0])?;
                let c = graph.cosine_matrix(d, psi)?;
                total = Some(match total {
                    None => c,
                    Some(t) => graph.add(t, c)?,
                });
            }
            Ok(total.expect("at least one transition"))
        }
    }
}

/// Symmetric contrastive loss of a logit node.
pub fn contrastive_loss_graph(graph: &mut Graph, logits: NodeId, temperature: f64) -> Result<NodeId> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let b = match graph.value(logits).dims2() {
        Some((n, m)) if n == m => n,
        _ => {
            return Err(Error::ShapeMismatch {
                op: "contrastive_loss",
                left: vec![0, 0],
                right: graph.value(logits).shape().to_vec(),
            })
        }
    };
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    let m = if temperature == 1.0 {
        logits
    } else {
        graph.scale(logits, 1.0 / temperature)
    };
    let over_instructions = graph.logsumexp_rows(m)?;
    let mt = graph.transpose(m)?;
    let over_segments = graph.logsumexp_rows(mt)?;
    let d = graph.diag(m)?;
    let d2 = graph.scale(d, 2.0);
    let lse = graph.add(over_instructions, over_segments)?;
    let per = graph.sub(lse, d2)?;
    Ok(graph.mean(per))
}

/// Logit matrix from plain embeddings.
pub fn logit_matrix(variant: Variant, batch: &BatchEmbeddings) -> Result<DenseArray> {
    let mut g = Graph::new();
    let frames: Vec<NodeId> = batch.frames.iter().map(|f| g.leaf(f.clone())).collect();
    let psi = g.leaf(batch.instructions.clone());
    let l = logits_graph(&mut g, variant, &frames, psi)?;
    Ok(g.value(l).clone())
}

/// Loss of a square logit matrix, without a tape.
pub fn contrastive_loss(logits: &DenseArray, temperature: f64) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.leaf(logits.clone());
    let loss = contrastive_loss_graph(&mut g, l, temperature)?;
    Ok(g.value(loss).values()[0])
}

/// Loss value plus its gradient with respect to every frame matrix and the
/// instruction matrix.
pub fn loss_and_gradients(spec: &ObjectiveSpec, batch: &BatchEmbeddings) -> Result<(f64, Vec<DenseArray>, DenseArray)> {
    let mut g = Graph::new();
    let frames: Vec<NodeId> = batch.frames.iter().map(|f| g.leaf(f.clone())).collect();
    let psi = g.leaf(batch.instructions.clone());
    let l = logits_graph(&mut g, spec.variant, &frames, psi)?;
    let loss = contrastive_loss_graph(&mut g, l, spec.temperature)?;
    let mut grads = g.backward(loss)?;
    let frame_grads = frames.iter().map(|&f| grads.take(f)).collect();
    Ok((g.value(loss).values()[0], frame_grads, grads.take(psi)))
}

pub fn batch_loss(spec: &ObjectiveSpec, batch: &BatchEmbeddings) -> Result<f64> {
    let logits = logit_matrix(spec.variant, batch)?;
    contrastive_loss(&logits, spec.temperature)
}

pub fn decisionnce_p_loss(batch: &BatchEmbeddings) -> Result<f64> {
    batch_loss(&ObjectiveSpec::new(Variant::P), batch)
}

pub fn decisionnce_t_loss(batch: &BatchEmbeddings) -> Result<f64> {
    batch_loss(&ObjectiveSpec::new(Variant::T), batch)
}

pub fn frame_alignment_loss(batch: &BatchEmbeddings) -> Result<f64> {
    batch_loss(&ObjectiveSpec::new(Variant::FrameAlign), batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, k: usize) -> DenseArray {
        DenseArray::matrix(n, k, (0..n * k).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    fn random_batch(seed: u64, variant: Variant, b: usize, k: usize) -> BatchEmbeddings {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..variant.frames_per_segment())
            .map(|_| random_matrix(&mut rng, b, k))
            .collect();
        BatchEmbeddings::new(frames, random_matrix(&mut rng, b, k)).unwrap()
    }

    #[test]
    fn bt_examples() {
        assert_eq!(bt_probability(1.0, 1.0), 0.5);
        assert!((bt_probability(3f64.ln(), 0.0) - 0.75).abs() < 1e-15);
        assert!((bt_probability(0.0, 3f64.ln()) - 0.25).abs() < 1e-15);
        assert_eq!(bt_probability(800.0, 0.0), 1.0);
        assert_eq!(bt_probability(-800.0, 0.0), 0.0);
    }

    #[test]
    fn step_reward_examples() {
        assert_eq!(potential_step_reward(&[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(potential_step_reward(&[0.3, 0.4], &[0.3, 0.4], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(potential_step_reward(&[0.0, 1.0], &[1.0, 0.0], &[0.0, 1.0]).unwrap(), -1.0);
        assert!(potential_step_reward(&[0.0], &[1.0, 0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn telescoping_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = 16;
        let start: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let goal: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let psi: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let mut chain = vec![start.clone()];
        for _ in 0..7 {
            chain.push((0..k).map(|_| rng.sample(StandardNormal)).collect());
        }
        chain.push(goal.clone());
        let steps: f64 = chain
            .windows(2)
            .map(|w| potential_step_reward(&w[0], &w[1], &psi).unwrap())
            .sum();
        let whole = segment_reward_potential(&start, &goal, &psi).unwrap();
        assert!((steps - whole).abs() < 1e-12);
        assert_eq!(segment_reward_potential(&start, &start, &psi).unwrap(), 0.0);
        assert_eq!(segment_reward_potential(&[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]).unwrap(), 1.0);
    }

    #[test]
    fn transition_reward_examples() {
        assert!((segment_reward_transition(&[1.0, 1.0], &[1.0, 3.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(segment_reward_transition(&[0.2, 0.7], &[0.2, 0.7], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(segment_reward_transition(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn multiframe_examples() {
        let psi = [0.0, 1.0];
        let adv: Vec<[f64; 2]> = (0..5).map(|i| [0.0, i as f64]).collect();
        let refs: Vec<&[f64]> = adv.iter().map(|f| f.as_slice()).collect();
        assert!((multiframe_transition_reward(&refs, &psi, 4).unwrap() - 4.0).abs() < 1e-15);
        let flat = [[0.5, 0.5]; 5];
        let refs: Vec<&[f64]> = flat.iter().map(|f| f.as_slice()).collect();
        assert_eq!(multiframe_transition_reward(&refs, &psi, 4).unwrap(), 0.0);
        assert!(multiframe_transition_reward(&refs[..4], &psi, 4).is_err());
        let (a, b) = ([0.3, -1.0], [2.0, 0.5]);
        assert_eq!(
            multiframe_transition_reward(&[&a, &b], &psi, 1).unwrap(),
            segment_reward_transition(&a, &b, &psi).unwrap()
        );
    }

    #[test]
    fn equal_logits_give_two_ln_b() {
        for b in [2usize, 4, 9] {
            let l = DenseArray::matrix(b, b, vec![0.37; b * b]).unwrap();
            let v = contrastive_loss(&l, 1.0).unwrap();
            assert!((v - 2.0 * (b as f64).ln()).abs() < 1e-12);
        }
        // identical embeddings make every logit equal for each variant
        for variant in Variant::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let k = 6;
            let frames: Vec<DenseArray> = (0..variant.frames_per_segment())
                .map(|f| {
                    let row: Vec<f64> = (0..k).map(|j| (f * k + j) as f64 + rng.random::<f64>()).collect();
                    DenseArray::from_rows(&vec![row; 4]).unwrap()
                })
                .collect();
            let psi = DenseArray::from_rows(&vec![vec![1.0; k]; 4]).unwrap();
            let batch = BatchEmbeddings::new(frames, psi).unwrap();
            let v = batch_loss(&ObjectiveSpec::new(variant), &batch).unwrap();
            assert!((v - 2.0 * 4f64.ln()).abs() < 1e-12, "{variant}: {v}");
        }
    }

    #[test]
    fn saturated_margin() {
        let l = DenseArray::matrix(2, 2, vec![20.0, 0.0, 0.0, 20.0]).unwrap();
        let v = contrastive_loss(&l, 1.0).unwrap();
        assert!(v < 1e-8);
        assert!((v - 2.0 * (-20f64).exp().ln_1p()).abs() < 1e-13);
    }

    #[test]
    fn shift_invariance_per_denominator() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let l = random_matrix(&mut rng, 5, 5);
        let base = contrastive_loss(&l, 1.0).unwrap();
        let shifted = DenseArray::matrix(5, 5, l.values().iter().map(|v| v + 3.25).collect()).unwrap();
        assert!((contrastive_loss(&shifted, 1.0).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn batch_too_small() {
        let one = DenseArray::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            BatchEmbeddings::new(vec![one.clone(), one.clone()], one.clone()),
            Err(Error::BatchTooSmall(1))
        ));
        assert!(matches!(
            contrastive_loss(&DenseArray::matrix(1, 1, vec![0.0]).unwrap(), 1.0),
            Err(Error::BatchTooSmall(1))
        ));
    }

    #[test]
    fn logits_match_scalar_rewards() {
        for variant in [Variant::P, Variant::T, Variant::T4, Variant::FrameAlign] {
            let batch = random_batch(5, variant, 3, 4);
            let m = logit_matrix(variant, &batch).unwrap();
            for a in 0..3 {
                for b in 0..3 {
                    let psi = batch.instructions.row(b);
                    let f: Vec<&[f64]> = batch.frames.iter().map(|x| x.row(a)).collect();
                    let expect = match variant {
                        Variant::P => segment_reward_potential(f[0], f[1], psi).unwrap(),
                        Variant::T => segment_reward_transition(f[0], f[1], psi).unwrap(),
                        Variant::T4 => multiframe_transition_reward(&f, psi, 4).unwrap(),
                        _ => kernels::cosine(f[0], psi),
                    };
                    assert!((m.values()[a * 3 + b] - expect).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn gradients_pass_finite_differences() {
        for variant in Variant::ALL {
            for seed in 0..20 {
                let batch = random_batch(100 + seed, variant, 3, 4);
                let spec = ObjectiveSpec::new(variant);
                // flatten every embedding into one parameter vector
                let nf = batch.frames.len();
                let mut theta = Vec::new();
                for f in &batch.frames {
                    theta.extend_from_slice(f.values());
                }
                theta.extend_from_slice(batch.instructions.values());
                let unpack = |t: &DenseArray| {
                    let chunk = 12;
                    let frames = (0..nf)
                        .map(|i| DenseArray::matrix(3, 4, t.values()[i * chunk..(i + 1) * chunk].to_vec()).unwrap())
                        .collect();
                    let psi = DenseArray::matrix(3, 4, t.values()[nf * chunk..].to_vec()).unwrap();
                    BatchEmbeddings::new(frames, psi).unwrap()
                };
                let f = |t: &DenseArray| {
                    let (v, fg, pg) = loss_and_gradients(&spec, &unpack(t))?;
                    let mut g = Vec::new();
                    for x in &fg {
                        g.extend_from_slice(x.values());
                    }
                    g.extend_from_slice(pg.values());
                    Ok((v, DenseArray::vector(g)))
                };
                let err = finite_difference_check(f, &DenseArray::vector(theta), 1e-6).unwrap();
                assert!(err <= 1e-5, "{variant} seed {seed}: {err}");
            }
        }
    }

    fn descend(batch: &BatchEmbeddings, spec: &ObjectiveSpec, lr: f64) -> BatchEmbeddings {
        let (_, fg, pg) = loss_and_gradients(spec, batch).unwrap();
        let step = |x: &DenseArray, g: &DenseArray| {
            DenseArray::new(
                x.shape().to_vec(),
                x.values().iter().zip(g.values()).map(|(a, b)| a - lr * b).collect(),
            )
            .unwrap()
        };
        let frames = batch.frames.iter().zip(&fg).map(|(x, g)| step(x, g)).collect();
        BatchEmbeddings::new(frames, step(&batch.instructions, &pg)).unwrap()
    }

    #[test]
    fn gradient_step_separates_matched_pair() {
        let start = DenseArray::from_rows(&[[0.1, -0.2], [0.3, 0.1]]).unwrap();
        let goal = DenseArray::from_rows(&[[1.1, 0.3], [0.8, 1.1]]).unwrap();
        let psi = DenseArray::from_rows(&[[1.0, 0.1], [0.2, 1.0]]).unwrap();
        let batch = BatchEmbeddings::new(vec![start, goal], psi).unwrap();
        let spec = ObjectiveSpec::new(Variant::T);
        let before = logit_matrix(Variant::T, &batch).unwrap();
        let after = logit_matrix(Variant::T, &descend(&batch, &spec, 1e-3)).unwrap();
        let (b, a) = (before.values(), after.values());
        assert!(a[0] > b[0] && a[3] > b[3]);
        assert!(a[1] < b[1] && a[2] < b[2]);
    }

    #[test]
    fn small_gradient_step_lowers_the_loss() {
        for variant in Variant::ALL {
            let spec = ObjectiveSpec::new(variant);
            for seed in 0..50 {
                let batch = random_batch(seed, variant, 4, 5);
                let before = batch_loss(&spec, &batch).unwrap();
                let after = batch_loss(&spec, &descend(&batch, &spec, 1e-5)).unwrap();
                assert!(after < before, "{variant} seed {seed}");
            }
        }
    }

    #[test]
    fn temperature_hook() {
        let l = DenseArray::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let hot = contrastive_loss(&l, 0.1).unwrap();
        let scaled = DenseArray::matrix(2, 2, vec![10.0, 0.0, 0.0, 10.0]).unwrap();
        assert!((hot - contrastive_loss(&scaled, 1.0).unwrap()).abs() < 1e-15);
        assert!(contrastive_loss(&l, 0.0).is_err());
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert!(Variant::parse("Q").is_err());
    }
}
