//! Central finite differences against an analytic gradient.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::Rng;

use crate::env::{build_planted_tree, NodeId};
use crate::error::{Error, Result};
use crate::policy::{init_policy, InitMode, Policy, ReferencePolicy};
use crate::rng::substream;
use crate::sampler::{branch, sample_group, sample_pivot, segment, AuxiliarySet, Group, PivotPlan, Streams};

use super::{
    aux_stream_gradient, aux_stream_objective, global_advantages, local_advantages,
    main_stream_gradient, main_stream_objective, AdvantageSet, GradientMap, OptimConfig,
};

/// Magnitude below which errors are measured in absolute terms.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub node: NodeId,
    pub action: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    /// Coordinates above the tolerance, worst first.
    pub offending: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.offending.is_empty()
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Perturbs every logit of `nodes` by `±step` and compares
/// `(f(θ+h) - f(θ-h)) / 2h` with `analytic` (missing entries count as 0).
pub fn finite_difference_check(
    objective: impl Fn(&Policy) -> Result<f64>,
    policy: &Policy,
    analytic: &GradientMap,
    nodes: &[NodeId],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::domain(format!("step must be positive, got {step}")));
    }
    let mut probe = policy.clone();
    let mut worst = 0.0f64;
    let mut total = 0.0;
    let mut count = 0;
    let mut offending = Vec::new();
    for &node in nodes {
        let base = policy.logits(node)?;
        for j in 0..base.len() {
            let mut l = base.clone();
            l[j] = base[j] + step;
            probe.set_logits(node, &l)?;
            let up = objective(&probe)?;
            l[j] = base[j] - step;
            probe.set_logits(node, &l)?;
            let down = objective(&probe)?;
            probe.set_logits(node, &base)?;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.get(&node).map_or(0.0, |g| g[j]);
            let rel = relative_error(a, numeric);
            worst = worst.max(rel);
            total += rel;
            count += 1;
            if !(rel <= tolerance) {
                offending.push(Mismatch { node, action: j, analytic: a, numeric, rel_error: rel });
            }
        }
    }
    offending.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    Ok(GradCheckReport {
        coordinates: count,
        max_rel_error: worst,
        mean_rel_error: if count == 0 { 0.0 } else { total / count as f64 },
        offending,
    })
}

/// A sampled batch with both streams, held fixed while logits are probed.
#[derive(Debug, Clone)]
pub struct FrozenBatch {
    pub policy: Policy,
    pub reference: ReferencePolicy,
    pub groups: Vec<Group>,
    pub main_advantages: Vec<AdvantageSet>,
    pub aux_sets: Vec<AuxiliarySet>,
    pub aux_advantages: Vec<AdvantageSet>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchShape {
    pub max_depth: u32,
    pub max_arity: u32,
    pub max_group: usize,
    pub max_branches: usize,
}

impl Default for BatchShape {
    fn default() -> Self {
        Self { max_depth: 4, max_arity: 3, max_group: 4, max_branches: 4 }
    }
}

/// Random small tree, random policy and reference, one or two groups, and
/// one auxiliary set per main chain at a uniformly drawn pivot.
pub fn random_frozen_batch(seed: u64, shape: BatchShape) -> Result<FrozenBatch> {
    let mut rng = substream(seed, &[0x4652_5a4e]);
    let depth = rng.gen_range(2..=shape.max_depth.max(2));
    let arity = rng.gen_range(2..=shape.max_arity.max(2));
    let g = rng.gen_range(2..=shape.max_group.max(2));
    let k = rng.gen_range(2..=shape.max_branches.max(2));
    let env = Arc::new(build_planted_tree(depth, arity, 0.4, seed)?);
    let policy = init_policy(env.clone(), InitMode::SeededRandom { scale: 1.5, seed })?;
    let reference =
        init_policy(env, InitMode::SeededRandom { scale: 1.0, seed: seed ^ 0x5eed })?.snapshot();
    let streams = Streams::new(seed, 0);
    let prompts = rng.gen_range(1..=2u32);
    let mut groups = Vec::new();
    let mut aux_sets = Vec::new();
    for prompt in 0..prompts {
        let group = sample_group(&policy, prompt, g, &streams)?;
        for (i, t) in group.trajectories.iter().enumerate() {
            let Some(index) = segment(t, 1)? else { continue };
            let mut prng = streams.pivot(prompt, i);
            let uniform = vec![1.0 / index.count() as f64; index.count()];
            let t_star = sample_pivot(&uniform, &mut prng)?;
            let plan = PivotPlan::new(i, 0, &index, t_star)?;
            aux_sets.push(branch(&policy, t, plan, k, &streams, true)?);
        }
        groups.push(group);
    }
    let main_advantages = groups.iter().map(global_advantages).collect::<Result<_>>()?;
    let aux_advantages = aux_sets.iter().map(local_advantages).collect();
    Ok(FrozenBatch { policy, reference, groups, main_advantages, aux_sets, aux_advantages })
}

#[derive(Debug, Clone)]
pub struct BatchCheck {
    pub main: GradCheckReport,
    pub aux: GradCheckReport,
    /// Nodes seen only in auxiliary prefixes, and whether all their aux
    /// gradient entries are exactly zero.
    pub prefix_only_nodes: usize,
    pub prefix_only_zero: bool,
}

impl BatchCheck {
    pub fn passed(&self) -> bool {
        self.main.passed() && self.aux.passed() && self.prefix_only_zero
    }
}

/// Checks both streams of `batch` at its current logits.
pub fn check_batch(batch: &FrozenBatch, config: &OptimConfig, step: f64, tolerance: f64) -> Result<BatchCheck> {
    let nodes: Vec<NodeId> = batch.policy.env().internal_nodes().collect();
    let g_main = main_stream_gradient(
        &batch.policy,
        &batch.reference,
        &batch.groups,
        &batch.main_advantages,
        config,
    )?;
    let main = finite_difference_check(
        |p| main_stream_objective(p, &batch.reference, &batch.groups, &batch.main_advantages, config),
        &batch.policy,
        &g_main.gradient(),
        &nodes,
        step,
        tolerance,
    )?;
    let g_aux = aux_stream_gradient(
        &batch.policy,
        &batch.reference,
        &batch.aux_sets,
        &batch.aux_advantages,
        config,
    )?
    .gradient();
    let aux = finite_difference_check(
        |p| aux_stream_objective(p, &batch.reference, &batch.aux_sets, &batch.aux_advantages, config),
        &batch.policy,
        &g_aux,
        &nodes,
        step,
        tolerance,
    )?;
    let mut prefix = BTreeSet::new();
    let mut suffix = BTreeSet::new();
    for s in &batch.aux_sets {
        for t in &s.branches {
            for (i, tok) in t.actions.iter().enumerate() {
                if i < t.prefix_len {
                    prefix.insert(tok.node);
                } else {
                    suffix.insert(tok.node);
                }
            }
        }
    }
    let prefix_only: Vec<NodeId> = prefix.difference(&suffix).copied().collect();
    let prefix_only_zero = prefix_only
        .iter()
        .all(|n| g_aux.get(n).is_none_or(|g| g.iter().all(|&x| x == 0.0)));
    Ok(BatchCheck { main, aux, prefix_only_nodes: prefix_only.len(), prefix_only_zero })
}
