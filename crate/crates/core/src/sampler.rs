//! Main-chain groups, segmentation, pivot selection and auxiliary branches.
//!
//! A failed root rollout is cut into fixed-length segments. Each interior
//! segment boundary is a candidate pivot; with `T` candidates the trajectory
//! has `T + 1` chunks and candidate `t` sits at normalized depth
//! `r = t / (T + 1)`, strictly inside `(0, 1)`. The pivot is drawn from
//!
//! ```text
//! Q(t) ∝ P(success | r_t) · r_t^γ
//! ```
//!
//! and `K` completions are resampled from the prefix ending there.

use std::io::Write;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::Reward;
use crate::error::{Error, Result};
use crate::policy::{sample_trajectory, Origin, Policy, Start, Trajectory};
use crate::rng::{categorical, substream, UniformSource, AUX, MAIN, PIVOT};

/// Below this total weight the recoverability factor is ignored.
pub const DEGENERATE_WEIGHT: f64 = 1e-12;

/// Seeds for every rollout of one training step.
///
/// Each rollout gets its own stream keyed by what it is, so runs that share
/// the main chains of a step share them exactly, whatever else they sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    pub master: u64,
    pub step: u64,
}

impl Streams {
    pub fn new(master: u64, step: u64) -> Self {
        Self { master, step }
    }

    pub fn main(&self, prompt: u32, index: usize) -> ChaCha8Rng {
        substream(self.master, &[self.step, prompt as u64, MAIN, index as u64])
    }

    pub fn pivot(&self, prompt: u32, parent: usize) -> ChaCha8Rng {
        substream(self.master, &[self.step, prompt as u64, PIVOT, parent as u64])
    }

    pub fn aux(&self, prompt: u32, parent: usize, ordinal: usize, branch: usize) -> ChaCha8Rng {
        substream(
            self.master,
            &[self.step, prompt as u64, AUX, parent as u64, ordinal as u64, branch as u64],
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub prompt_id: u32,
    pub trajectories: Vec<Trajectory>,
}

impl Group {
    pub fn size(&self) -> usize {
        self.trajectories.len()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.trajectories.iter().map(Trajectory::reward_value).collect()
    }

    /// Indices of trajectories with reward 0.
    pub fn failed(&self) -> Vec<usize> {
        (0..self.size()).filter(|&i| !self.trajectories[i].succeeded()).collect()
    }

    pub fn successes(&self) -> usize {
        self.trajectories.iter().filter(|t| t.succeeded()).count()
    }

    pub fn token_count(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }
}

/// Samples `g` root rollouts, rollout `i` from stream `streams.main(prompt, i)`.
pub fn sample_group(policy: &Policy, prompt_id: u32, g: usize, streams: &Streams) -> Result<Group> {
    if g < 2 {
        return Err(Error::Precondition(format!(
            "group size must be >= 2 for a group standard deviation, got {g}"
        )));
    }
    let trajectories = sample_root_chains(policy, prompt_id, 0..g, streams)?;
    Ok(Group { prompt_id, trajectories })
}

/// Root rollouts for the given main-stream indices.
pub fn sample_root_chains(
    policy: &Policy,
    prompt_id: u32,
    indices: std::ops::Range<usize>,
    streams: &Streams,
) -> Result<Vec<Trajectory>> {
    indices
        .map(|i| {
            let mut rng = streams.main(prompt_id, i);
            sample_trajectory(policy, prompt_id, &mut rng, Start::Root)
        })
        .collect()
}

/// Candidate branching points of one trajectory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentIndex {
    /// Token offsets, strictly increasing, each leaving a nonempty suffix.
    pub boundaries: Vec<usize>,
    pub segment_len: usize,
}

impl SegmentIndex {
    /// Number of candidates `T`.
    pub fn count(&self) -> usize {
        self.boundaries.len()
    }

    /// Number of chunks, `T + 1`; the denominator of normalized depth.
    pub fn chunks(&self) -> usize {
        self.boundaries.len() + 1
    }

    /// `r_t = t / (T + 1)` for the 1-based candidate `t`.
    pub fn normalized_depth(&self, t: usize) -> f64 {
        t as f64 / self.chunks() as f64
    }

    /// Prefix length in tokens of the 1-based candidate `t`.
    pub fn offset(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.count() {
            return Err(Error::domain(format!(
                "pivot {t} outside candidates 1..={}",
                self.count()
            )));
        }
        Ok(self.boundaries[t - 1])
    }
}

/// Fixed-length chunking. Returns `None` when no boundary leaves a nonempty
/// suffix; the caller skips branching for that trajectory.
pub fn segment(trajectory: &Trajectory, segment_len: usize) -> Result<Option<SegmentIndex>> {
    if segment_len == 0 {
        return Err(Error::domain("segment_len must be positive"));
    }
    let len = trajectory.len();
    let boundaries: Vec<usize> = (1..).map(|k| k * segment_len).take_while(|&b| b < len).collect();
    Ok((!boundaries.is_empty()).then_some(SegmentIndex { boundaries, segment_len }))
}

/// Something that maps normalized depth to a success probability.
pub trait Recoverability {
    fn recoverability(&self, r: f64) -> Result<f64>;
}

/// A fixed recoverability, e.g. for the uniform-pivot baseline.
#[derive(Debug, Clone, Copy)]
pub struct ConstantRecoverability(pub f64);

impl Recoverability for ConstantRecoverability {
    fn recoverability(&self, _r: f64) -> Result<f64> {
        Ok(self.0)
    }
}

/// `Q(t) ∝ P(success | r_t) · r_t^γ` over the candidates of `index`.
///
/// Falls back to the depth factor alone when the weights vanish, which
/// happens once the estimator saturates near zero.
pub fn pivot_distribution(
    index: &SegmentIndex,
    estimator: &impl Recoverability,
    gamma: f64,
) -> Result<Vec<f64>> {
    if !gamma.is_finite() {
        return Err(Error::domain(format!("gamma must be finite, got {gamma}")));
    }
    let t_count = index.count();
    if t_count == 0 {
        return Err(Error::Precondition("no candidate pivots".into()));
    }
    let depth: Vec<f64> = (1..=t_count).map(|t| index.normalized_depth(t).powf(gamma)).collect();
    let mut weights = Vec::with_capacity(t_count);
    for (t, d) in (1..=t_count).zip(&depth) {
        weights.push(estimator.recoverability(index.normalized_depth(t))? * d);
    }
    let total: f64 = weights.iter().sum();
    let (weights, total) = if total.is_finite() && total >= DEGENERATE_WEIGHT {
        (weights, total)
    } else {
        let s = depth.iter().sum();
        (depth, s)
    };
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Categorical draw returning a 1-based candidate index.
pub fn sample_pivot(q: &[f64], rng: &mut impl UniformSource) -> Result<usize> {
    if q.is_empty() {
        return Err(Error::Precondition("empty pivot distribution".into()));
    }
    Ok(categorical(q, rng.next_uniform()?) + 1)
}

/// Draws up to `count` distinct pivots without replacement, renormalizing
/// after each draw.
pub fn sample_distinct_pivots(
    q: &[f64],
    count: usize,
    rng: &mut impl UniformSource,
) -> Result<Vec<usize>> {
    let mut remaining = q.to_vec();
    let mut picked = Vec::new();
    for _ in 0..count.min(q.len()) {
        let total: f64 = remaining.iter().sum();
        if !(total > 0.0) {
            break;
        }
        let norm: Vec<f64> = remaining.iter().map(|w| w / total).collect();
        let t = sample_pivot(&norm, rng)?;
        picked.push(t);
        remaining[t - 1] = 0.0;
    }
    Ok(picked)
}

/// A chosen branching point on a parent trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PivotPlan {
    /// Position of the parent within its group.
    pub parent: usize,
    /// Which pivot of this parent (0 for the first).
    pub ordinal: usize,
    /// 1-based candidate index `t*`.
    pub t_star: usize,
    pub candidates: usize,
    pub normalized_depth: f64,
    pub prefix_len: usize,
}

impl PivotPlan {
    pub fn new(parent: usize, ordinal: usize, index: &SegmentIndex, t_star: usize) -> Result<Self> {
        let prefix_len = index.offset(t_star)?;
        Ok(Self {
            parent,
            ordinal,
            t_star,
            candidates: index.count(),
            normalized_depth: index.normalized_depth(t_star),
            prefix_len,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliarySet {
    pub prompt_id: u32,
    pub plan: PivotPlan,
    pub branches: Vec<Trajectory>,
    /// 1 iff any branch reached a correct leaf.
    pub recovery_label: Reward,
}

impl AuxiliarySet {
    pub fn rewards(&self) -> Vec<f64> {
        self.branches.iter().map(Trajectory::reward_value).collect()
    }

    /// Tokens actually generated, i.e. suffixes only.
    pub fn suffix_tokens(&self) -> usize {
        self.branches.iter().map(Trajectory::suffix_len).sum()
    }

    pub fn recovered(&self) -> bool {
        self.recovery_label.is_success()
    }
}

/// Resamples `k` completions from the prefix of `parent` selected by `plan`.
///
/// Branching from a successful parent is refused unless `allow_success`.
pub fn branch(
    policy: &Policy,
    parent: &Trajectory,
    plan: PivotPlan,
    k: usize,
    streams: &Streams,
    allow_success: bool,
) -> Result<AuxiliarySet> {
    if k == 0 {
        return Err(Error::domain("branch count must be positive"));
    }
    if parent.succeeded() && !allow_success {
        return Err(Error::Precondition("branching from a successful trajectory".into()));
    }
    if plan.prefix_len == 0 || plan.prefix_len >= parent.len() {
        return Err(Error::domain(format!(
            "pivot offset {} must lie strictly inside a trajectory of length {}",
            plan.prefix_len,
            parent.len()
        )));
    }
    let mut branches = Vec::with_capacity(k);
    for b in 0..k {
        let mut rng = streams.aux(parent.prompt_id, plan.parent, plan.ordinal, b);
        let t = sample_trajectory(
            policy,
            parent.prompt_id,
            &mut rng,
            Start::Prefix { parent, prefix_len: plan.prefix_len },
        )?;
        branches.push(t);
    }
    let recovered = branches.iter().any(Trajectory::succeeded);
    Ok(AuxiliarySet {
        prompt_id: parent.prompt_id,
        plan,
        branches,
        recovery_label: if recovered { Reward::CORRECT } else { Reward::INCORRECT },
    })
}

/// One line of the optional rollout log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub step: u64,
    pub prompt_id: u32,
    pub origin: Origin,
    /// Main-chain index; for branches, the index of the parent chain.
    pub chain: usize,
    /// Pivot ordinal and 1-based `t*`, for branches only.
    pub ordinal: Option<usize>,
    pub t_star: Option<usize>,
    pub reward: u8,
    pub suffix_tokens: usize,
}

impl RolloutRecord {
    pub fn main(step: u64, chain: usize, t: &Trajectory) -> Self {
        Self {
            step,
            prompt_id: t.prompt_id,
            origin: t.origin,
            chain,
            ordinal: None,
            t_star: None,
            reward: t.reward.map_or(0, u8::from),
            suffix_tokens: t.suffix_len(),
        }
    }

    pub fn aux(step: u64, set: &AuxiliarySet) -> Vec<Self> {
        set.branches
            .iter()
            .map(|t| Self {
                step,
                prompt_id: t.prompt_id,
                origin: t.origin,
                chain: set.plan.parent,
                ordinal: Some(set.plan.ordinal),
                t_star: Some(set.plan.t_star),
                reward: t.reward.map_or(0, u8::from),
                suffix_tokens: t.suffix_len(),
            })
            .collect()
    }

    pub fn write_line(&self, out: &mut impl Write) -> Result<()> {
        serde_json::to_writer(&mut *out, self)?;
        out.write_all(b"\n")?;
        Ok(())
    }
}
