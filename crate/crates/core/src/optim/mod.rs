//! Group advantages, the clipped surrogate and its analytic gradient.
//!
//! Everything here is written in ascent orientation: a gradient is `∇J` of
//! the surrogate to be maximized,
//!
//! ```text
//! J = Σ_t [ min(ρ_t A, clip(ρ_t, 1-ε, 1+ε) A) - β k3_t ] / N
//! ```
//!
//! and an update moves logits by `+η (g_main + λ g_aux)`. Main and auxiliary
//! streams keep separate normalizers `N`, so neither can swamp the other.
//! Auxiliary tokens copied from the parent prefix are skipped entirely.

pub mod gradcheck;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::env::NodeId;
use crate::error::{Error, Result};
use crate::policy::{log_softmax_at, softmax, Policy, ReferencePolicy, Trajectory};
use crate::sampler::{AuxiliarySet, Group};

pub use gradcheck::{finite_difference_check, GradCheckReport};

pub type GradientMap = BTreeMap<NodeId, Vec<f64>>;

/// On-policy tolerance between stored and recomputed log-probabilities.
pub const ON_POLICY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvantageStream {
    Global,
    Local,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageSet {
    pub values: Vec<f64>,
    pub stream: AdvantageStream,
    /// Rewards had zero spread; every value is 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossNorm {
    /// Sum over every counted token of the stream, divided by their number.
    BatchTokenMean,
    /// Mean over tokens within a trajectory, then over trajectories.
    PerTrajectoryMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdvantageFilter {
    DropZero,
    KeepAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlMode {
    /// `x - ln x - 1`, `x = π_ref(a)/π(a)`, at the sampled action.
    K3,
    /// Full categorical `KL(π || π_ref)` at each visited node.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub epsilon: f64,
    pub beta: f64,
    pub lambda: f64,
    pub eta: f64,
    pub loss_norm: LossNorm,
    pub advantage_filter: AdvantageFilter,
    pub kl: KlMode,
    /// Reject tokens whose stored log-probability is stale.
    pub strict: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            beta: 1e-4,
            lambda: 1.0,
            eta: 0.05,
            loss_norm: LossNorm::BatchTokenMean,
            advantage_filter: AdvantageFilter::DropZero,
            kl: KlMode::K3,
            strict: false,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        for (name, v) in [("beta", self.beta), ("lambda", self.lambda), ("eta", self.eta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Standardizes rewards by their population mean and deviation.
pub fn standardize(rewards: &[f64], stream: AdvantageStream) -> AdvantageSet {
    let n = rewards.len() as f64;
    if rewards.len() < 2 {
        return AdvantageSet { values: vec![0.0; rewards.len()], stream, degenerate: true };
    }
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    // Equal rewards can leave a rounding-level spread.
    if sd <= 1e-12 * mean.abs().max(1.0) {
        return AdvantageSet { values: vec![0.0; rewards.len()], stream, degenerate: true };
    }
    AdvantageSet {
        values: rewards.iter().map(|r| (r - mean) / sd).collect(),
        stream,
        degenerate: false,
    }
}

pub fn global_advantages(group: &Group) -> Result<AdvantageSet> {
    if group.size() < 2 {
        return Err(Error::Precondition("group size must be >= 2".into()));
    }
    Ok(standardize(&group.rewards(), AdvantageStream::Global))
}

/// Advantages relative to sibling branches only. A single branch is
/// degenerate by definition.
pub fn local_advantages(aux: &AuxiliarySet) -> AdvantageSet {
    standardize(&aux.rewards(), AdvantageStream::Local)
}

pub fn clipped_term(rho: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = rho.clamp(1.0 - epsilon, 1.0 + epsilon);
    (rho * advantage).min(clipped * advantage)
}

/// Raw per-node sums plus the counts needed to normalize them.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientAccumulator {
    sums: GradientMap,
    pub token_count: usize,
    pub trajectory_count: usize,
    /// Raw objective sum, normalized the same way as the gradient.
    pub objective_sum: f64,
    pub norm: LossNorm,
}

impl GradientAccumulator {
    pub fn new(norm: LossNorm) -> Self {
        Self { sums: GradientMap::new(), token_count: 0, trajectory_count: 0, objective_sum: 0.0, norm }
    }

    pub fn denominator(&self) -> usize {
        match self.norm {
            LossNorm::BatchTokenMean => self.token_count,
            LossNorm::PerTrajectoryMean => self.trajectory_count,
        }
    }

    pub fn raw(&self) -> &GradientMap {
        &self.sums
    }

    /// Normalized gradient; empty when nothing contributed.
    pub fn gradient(&self) -> GradientMap {
        self.gradient_over(self.denominator())
    }

    /// Raw sums divided by an externally supplied denominator, e.g. the
    /// count over every prompt of a batch.
    pub fn gradient_over(&self, denominator: usize) -> GradientMap {
        if denominator == 0 {
            return GradientMap::new();
        }
        let inv = 1.0 / denominator as f64;
        self.sums
            .iter()
            .map(|(n, v)| (*n, v.iter().map(|x| x * inv).collect()))
            .collect()
    }

    pub fn objective(&self) -> f64 {
        match self.denominator() {
            0 => 0.0,
            d => self.objective_sum / d as f64,
        }
    }

    /// Adds another accumulator's raw sums, e.g. one per prompt before the
    /// global normalization.
    pub fn merge(&mut self, other: &GradientAccumulator) -> Result<()> {
        if self.norm != other.norm {
            return Err(Error::Contract("merging accumulators with different norms".into()));
        }
        for (node, v) in &other.sums {
            let e = self.sums.entry(*node).or_insert_with(|| vec![0.0; v.len()]);
            for (a, b) in e.iter_mut().zip(v) {
                *a += b;
            }
        }
        self.token_count += other.token_count;
        self.trajectory_count += other.trajectory_count;
        self.objective_sum += other.objective_sum;
        Ok(())
    }

    fn add(&mut self, node: NodeId, arity: usize, scale: f64, dir: &[f64]) {
        let e = self.sums.entry(node).or_insert_with(|| vec![0.0; arity]);
        for (a, d) in e.iter_mut().zip(dir) {
            *a += scale * d;
        }
    }
}

/// A trajectory with its advantage; tokens before `from` are masked out.
#[derive(Debug, Clone, Copy)]
pub struct Scored<'a> {
    pub trajectory: &'a Trajectory,
    pub advantage: f64,
    pub from: usize,
}

/// Adds the surrogate's value and gradient for each scored trajectory.
pub fn accumulate(
    policy: &Policy,
    reference: &ReferencePolicy,
    items: &[Scored<'_>],
    config: &OptimConfig,
    acc: &mut GradientAccumulator,
) -> Result<()> {
    let env = policy.env();
    let mut traj_grad = GradientMap::new();
    for item in items {
        let t = item.trajectory;
        if item.from > t.len() {
            return Err(Error::Contract(format!("mask offset {} beyond length {}", item.from, t.len())));
        }
        let counted = t.len() - item.from;
        if counted == 0 {
            continue;
        }
        // Per-trajectory normalization scales this trajectory's sums by
        // 1/|counted tokens| before they enter the batch sums.
        let weight = match config.loss_norm {
            LossNorm::BatchTokenMean => 1.0,
            LossNorm::PerTrajectoryMean => 1.0 / counted as f64,
        };
        traj_grad.clear();
        let mut value = 0.0;
        for (idx, token) in t.actions.iter().enumerate().skip(item.from) {
            let node = token.node;
            let a = token.action as usize;
            let arity = env.arity(node);
            if arity == 0 || a >= arity {
                return Err(Error::domain(format!(
                    "token ({node}, {a}) does not match arity {arity}"
                )));
            }
            let logits = policy.logits_unchecked(node, arity);
            let probs = softmax(&logits);
            let logp = log_softmax_at(&logits, a);
            let behavior = t.behavior_logprobs[idx];
            if config.strict && (logp - behavior).abs() > ON_POLICY_TOL {
                return Err(Error::Contract(format!(
                    "off-policy token at {node}: stored {behavior}, current {logp}"
                )));
            }
            let rho = (logp - behavior).exp();
            let adv = item.advantage;
            value += clipped_term(rho, adv, config.epsilon);
            let clip_active = (adv > 0.0 && rho > 1.0 + config.epsilon)
                || (adv < 0.0 && rho < 1.0 - config.epsilon);
            // d log π(a) / d logit_j = 1[j = a] - π_j
            let mut dlogp: smallvec::SmallVec<[f64; 8]> = probs.iter().map(|p| -p).collect();
            dlogp[a] += 1.0;
            let mut coef = if clip_active { 0.0 } else { adv * rho };
            let reference_logits = if config.beta > 0.0 {
                Some(reference.policy().logits_unchecked(node, arity))
            } else {
                None
            };
            let entry = traj_grad.entry(node).or_insert_with(|| vec![0.0; arity]);
            if let Some(rl) = reference_logits {
                match config.kl {
                    KlMode::K3 => {
                        let log_x = log_softmax_at(&rl, a) - logp;
                        value -= config.beta * crate::policy::k3_from_log_ratio(log_x);
                        // d k3 = (1 - x) d log π
                        coef -= config.beta * (1.0 - log_x.exp());
                    }
                    KlMode::Exact => {
                        let logq: Vec<f64> = (0..arity).map(|j| log_softmax_at(&rl, j)).collect();
                        let logpi: Vec<f64> = (0..arity).map(|j| log_softmax_at(&logits, j)).collect();
                        let kl: f64 = (0..arity).map(|j| probs[j] * (logpi[j] - logq[j])).sum();
                        value -= config.beta * kl;
                        for j in 0..arity {
                            entry[j] -= config.beta * probs[j] * (logpi[j] - logq[j] - kl);
                        }
                    }
                }
            }
            for (e, d) in entry.iter_mut().zip(&dlogp) {
                *e += coef * d;
            }
        }
        for (node, g) in &traj_grad {
            acc.add(*node, g.len(), weight, g);
        }
        acc.objective_sum += weight * value;
        acc.token_count += counted;
        acc.trajectory_count += 1;
    }
    Ok(())
}

pub(crate) fn keep(advantage: f64, set: &AdvantageSet, filter: AdvantageFilter) -> bool {
    match filter {
        AdvantageFilter::KeepAll => true,
        AdvantageFilter::DropZero => !set.degenerate && advantage != 0.0,
    }
}

/// Scored main-chain tokens, with zero-advantage trajectories filtered.
pub fn main_items<'a>(
    groups: &'a [Group],
    advantages: &[AdvantageSet],
    config: &OptimConfig,
) -> Result<Vec<Scored<'a>>> {
    if groups.len() != advantages.len() {
        return Err(Error::Contract("one advantage set per group required".into()));
    }
    let mut items = Vec::new();
    for (g, set) in groups.iter().zip(advantages) {
        if g.size() != set.values.len() {
            return Err(Error::Contract("advantage count differs from group size".into()));
        }
        for (t, &a) in g.trajectories.iter().zip(&set.values) {
            if keep(a, set, config.advantage_filter) {
                items.push(Scored { trajectory: t, advantage: a, from: 0 });
            }
        }
    }
    Ok(items)
}

/// Scored auxiliary suffix tokens; `masked = false` also scores the prefix.
pub fn aux_items<'a>(
    sets: &'a [AuxiliarySet],
    advantages: &[AdvantageSet],
    config: &OptimConfig,
    masked: bool,
) -> Result<Vec<Scored<'a>>> {
    if sets.len() != advantages.len() {
        return Err(Error::Contract("one advantage set per auxiliary set required".into()));
    }
    let mut items = Vec::new();
    for (s, adv) in sets.iter().zip(advantages) {
        if s.branches.len() != adv.values.len() {
            return Err(Error::Contract("advantage count differs from branch count".into()));
        }
        for (t, &a) in s.branches.iter().zip(&adv.values) {
            if keep(a, adv, config.advantage_filter) {
                let from = if masked { t.prefix_len } else { 0 };
                items.push(Scored { trajectory: t, advantage: a, from });
            }
        }
    }
    Ok(items)
}

pub fn main_stream_gradient(
    policy: &Policy,
    reference: &ReferencePolicy,
    groups: &[Group],
    advantages: &[AdvantageSet],
    config: &OptimConfig,
) -> Result<GradientAccumulator> {
    let items = main_items(groups, advantages, config)?;
    let mut acc = GradientAccumulator::new(config.loss_norm);
    accumulate(policy, reference, &items, config, &mut acc)?;
    Ok(acc)
}

/// Same surrogate over suffix tokens only.
pub fn aux_stream_gradient(
    policy: &Policy,
    reference: &ReferencePolicy,
    sets: &[AuxiliarySet],
    advantages: &[AdvantageSet],
    config: &OptimConfig,
) -> Result<GradientAccumulator> {
    let items = aux_items(sets, advantages, config, true)?;
    let mut acc = GradientAccumulator::new(config.loss_norm);
    accumulate(policy, reference, &items, config, &mut acc)?;
    Ok(acc)
}

/// `θ ← θ + η (g_main + λ g_aux)` on normalized gradients.
///
/// Checks every entry before writing anything, so a numeric failure leaves
/// the policy untouched.
pub fn apply_update(
    policy: &mut Policy,
    g_main: &GradientAccumulator,
    g_aux: &GradientAccumulator,
    config: &OptimConfig,
) -> Result<()> {
    let aux = if config.lambda == 0.0 { GradientMap::new() } else { g_aux.gradient() };
    apply_gradients(policy, g_main.gradient(), &aux, config)
}

/// The update of [`apply_update`] from already normalized maps.
pub fn apply_gradients(
    policy: &mut Policy,
    main: GradientMap,
    aux: &GradientMap,
    config: &OptimConfig,
) -> Result<()> {
    let mut combined = main;
    if config.lambda != 0.0 {
        for (node, g) in aux {
            let e = combined.entry(*node).or_insert_with(|| vec![0.0; g.len()]);
            if e.len() != g.len() {
                return Err(Error::Contract(format!("gradient shapes differ at {node}")));
            }
            for (a, b) in e.iter_mut().zip(g) {
                *a += config.lambda * b;
            }
        }
    }
    for (node, g) in &combined {
        if let Some(j) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient at node {node}, action {j}: {}",
                g[j]
            )));
        }
    }
    if config.eta == 0.0 {
        return Ok(());
    }
    for (node, g) in &combined {
        let logits = policy.logits(*node)?;
        let overflow = logits.iter().zip(g).position(|(l, d)| !(l + config.eta * d).is_finite());
        if let Some(j) = overflow {
            return Err(Error::Numeric(format!(
                "update overflows logit {j} at node {node}: {} + {} * {}",
                logits[j], config.eta, g[j]
            )));
        }
    }
    for (node, g) in &combined {
        policy.add_scaled(*node, g, config.eta)?;
    }
    Ok(())
}

/// Normalized surrogate value for the main stream, for finite differences.
pub fn main_stream_objective(
    policy: &Policy,
    reference: &ReferencePolicy,
    groups: &[Group],
    advantages: &[AdvantageSet],
    config: &OptimConfig,
) -> Result<f64> {
    Ok(main_stream_gradient(policy, reference, groups, advantages, config)?.objective())
}

pub fn aux_stream_objective(
    policy: &Policy,
    reference: &ReferencePolicy,
    sets: &[AuxiliarySet],
    advantages: &[AdvantageSet],
    config: &OptimConfig,
) -> Result<f64> {
    Ok(aux_stream_gradient(policy, reference, sets, advantages, config)?.objective())
}

#[cfg(test)]
mod tests;
