//! Tabular softmax policies over tree nodes.
//!
//! Each internal node owns one logit vector. Trees with millions of nodes are
//! common here, so a policy stores a compact *base* (all zeros, seeded
//! pseudo-random values generated on demand, or the fixture's bundled
//! probabilities) plus an ordered map of nodes whose logits have been written.
//! Every internal node therefore has exactly one logit vector; most of them are
//! just never materialized.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::env::{Environment, NodeId, Reward};
use crate::error::{Error, Result};
use crate::rng::{categorical, derive_seed, splitmix64, UniformSource};

pub type Logits = SmallVec<[f64; 8]>;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum InitMode {
    Uniform,
    SeededRandom { scale: f64, seed: u64 },
    FixtureMatched,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum BaseLogits {
    Zeros,
    Seeded { scale: f64, seed: u64 },
    /// `ln p` of the environment's bundled edge probabilities.
    Bundled,
}

#[derive(Debug, Clone)]
pub struct Policy {
    env: Arc<Environment>,
    base: BaseLogits,
    overrides: BTreeMap<NodeId, Vec<f64>>,
}

/// Frozen copy of a policy, used as the KL anchor.
#[derive(Debug, Clone)]
pub struct ReferencePolicy(Policy);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Main,
    Auxiliary,
}

/// One emitted token: the node it was emitted from and the child index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub node: NodeId,
    pub action: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt_id: u32,
    pub actions: Vec<Token>,
    /// `log pi_old(a_t)` recorded when the token was sampled.
    pub behavior_logprobs: Vec<f64>,
    pub reward: Option<Reward>,
    pub origin: Origin,
    /// Tokens copied from the parent trajectory; 0 for main chains.
    pub prefix_len: usize,
    pub leaf: Option<NodeId>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn suffix_len(&self) -> usize {
        self.actions.len() - self.prefix_len
    }

    pub fn succeeded(&self) -> bool {
        self.reward.is_some_and(Reward::is_success)
    }

    pub fn reward_value(&self) -> f64 {
        self.reward.map_or(0.0, Reward::value)
    }

    /// Node the trajectory is at after `offset` tokens.
    pub fn node_at(&self, offset: usize) -> Option<NodeId> {
        if offset < self.actions.len() {
            Some(self.actions[offset].node)
        } else if offset == self.actions.len() {
            self.leaf
        } else {
            None
        }
    }
}

/// Where a rollout begins.
#[derive(Debug, Clone, Copy)]
pub enum Start<'a> {
    Root,
    /// Continue after the first `prefix_len` tokens of `parent`.
    Prefix { parent: &'a Trajectory, prefix_len: usize },
}

pub fn init_policy(env: Arc<Environment>, mode: InitMode) -> Result<Policy> {
    let base = match mode {
        InitMode::Uniform => BaseLogits::Zeros,
        InitMode::SeededRandom { scale, seed } => {
            if !(scale.is_finite() && scale >= 0.0) {
                return Err(Error::domain(format!("scale must be finite and >= 0, got {scale}")));
            }
            BaseLogits::Seeded { scale, seed }
        }
        InitMode::FixtureMatched => {
            if !env.has_bundled_policy() {
                return Err(Error::domain(format!(
                    "environment '{}' has no bundled policy",
                    env.name()
                )));
            }
            BaseLogits::Bundled
        }
    };
    Ok(Policy { env, base, overrides: BTreeMap::new() })
}

fn seeded_logit(scale: f64, seed: u64, node: NodeId, action: usize) -> f64 {
    let bits = splitmix64(derive_seed(seed, &[node.0 as u64, action as u64]));
    let u = (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    scale * (2.0 * u - 1.0)
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Logits {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Logits = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = out.iter().sum();
    for p in &mut out {
        *p /= z;
    }
    out
}

pub fn log_softmax_at(logits: &[f64], action: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&l| (l - m).exp()).sum();
    logits[action] - m - z.ln()
}

/// `x - ln x - 1` evaluated from `ln x`.
pub fn k3_from_log_ratio(log_x: f64) -> f64 {
    (log_x.exp_m1() - log_x).max(0.0)
}

pub fn shannon_entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

impl Policy {
    pub fn env(&self) -> &Arc<Environment> {
        &self.env
    }

    fn check_internal(&self, node: NodeId) -> Result<usize> {
        if !self.env.contains(node) {
            return Err(Error::NotFound(format!("node {node}")));
        }
        match self.env.arity(node) {
            0 => Err(Error::domain(format!("node {node} is a leaf and has no logits"))),
            a => Ok(a),
        }
    }

    fn base_logits(&self, node: NodeId, arity: usize) -> Logits {
        match self.base {
            BaseLogits::Zeros => SmallVec::from_elem(0.0, arity),
            BaseLogits::Seeded { scale, seed } => {
                (0..arity).map(|a| seeded_logit(scale, seed, node, a)).collect()
            }
            BaseLogits::Bundled => self
                .env
                .bundled_probs(node)
                .expect("bundled base requires bundled probabilities")
                .iter()
                .map(|p| p.ln())
                .collect(),
        }
    }

    /// True when the base is all zeros, so untouched subtrees are uniform.
    pub fn base_is_uniform(&self) -> bool {
        matches!(self.base, BaseLogits::Zeros)
    }

    pub fn logits(&self, node: NodeId) -> Result<Logits> {
        let arity = self.check_internal(node)?;
        Ok(self.logits_unchecked(node, arity))
    }

    pub(crate) fn logits_unchecked(&self, node: NodeId, arity: usize) -> Logits {
        match self.overrides.get(&node) {
            Some(v) => SmallVec::from_slice(v),
            None => self.base_logits(node, arity),
        }
    }

    pub fn set_logits(&mut self, node: NodeId, logits: &[f64]) -> Result<()> {
        let arity = self.check_internal(node)?;
        if logits.len() != arity {
            return Err(Error::domain(format!(
                "node {node} has arity {arity}, got {} logits",
                logits.len()
            )));
        }
        self.overrides.insert(node, logits.to_vec());
        Ok(())
    }

    /// Adds `scale * delta` to the logits of `node`.
    pub fn add_scaled(&mut self, node: NodeId, delta: &[f64], scale: f64) -> Result<()> {
        let arity = self.check_internal(node)?;
        if delta.len() != arity {
            return Err(Error::domain(format!(
                "node {node} has arity {arity}, got {} gradient entries",
                delta.len()
            )));
        }
        if !self.overrides.contains_key(&node) {
            let base = self.base_logits(node, arity).to_vec();
            self.overrides.insert(node, base);
        }
        let entry = self.overrides.get_mut(&node).expect("inserted above");
        for (l, d) in entry.iter_mut().zip(delta) {
            *l += scale * d;
        }
        Ok(())
    }

    pub(crate) fn clear_overrides(&mut self) {
        self.overrides.clear();
    }

    /// Nodes whose logits differ from the base (or were explicitly written).
    pub fn touched_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.overrides.keys().copied()
    }

    pub fn action_distribution(&self, node: NodeId) -> Result<Logits> {
        Ok(softmax(&self.logits(node)?))
    }

    pub fn log_prob_action(&self, node: NodeId, action: usize) -> Result<f64> {
        let logits = self.logits(node)?;
        if action >= logits.len() {
            return Err(Error::domain(format!(
                "action {action} out of range for node {node} with arity {}",
                logits.len()
            )));
        }
        Ok(log_softmax_at(&logits, action))
    }

    /// Per-token `log pi(a_t)` along a recorded trajectory.
    pub fn log_prob(&self, trajectory: &Trajectory) -> Result<Vec<f64>> {
        trajectory
            .actions
            .iter()
            .map(|t| self.log_prob_action(t.node, t.action as usize))
            .collect()
    }

    /// Shannon entropy (nats) of the action distribution at `node`.
    pub fn entropy(&self, node: NodeId) -> Result<f64> {
        Ok(shannon_entropy(&self.action_distribution(node)?))
    }

    /// Per-token KL penalty at a sampled action:
    /// `x - ln x - 1` with `x = pi_ref(a) / pi(a)`. Nonnegative, zero iff the
    /// two probabilities agree.
    pub fn kl_to_ref(&self, reference: &ReferencePolicy, node: NodeId, action: usize) -> Result<f64> {
        let lp = self.log_prob_action(node, action)?;
        let lr = reference.0.log_prob_action(node, action)?;
        Ok(k3_from_log_ratio(lr - lp))
    }

    /// Exact categorical `KL(pi || pi_ref)` at `node`.
    pub fn kl_exact(&self, reference: &ReferencePolicy, node: NodeId) -> Result<f64> {
        let l = self.logits(node)?;
        let r = reference.0.logits(node)?;
        let p = softmax(&l);
        Ok((0..l.len())
            .filter(|&a| p[a] > 0.0)
            .map(|a| p[a] * (log_softmax_at(&l, a) - log_softmax_at(&r, a)))
            .sum())
    }

    /// Argmax action; ties go to the lowest index.
    pub fn greedy_action(&self, node: NodeId) -> Result<usize> {
        let l = self.logits(node)?;
        let mut best = 0;
        for a in 1..l.len() {
            if l[a] > l[best] {
                best = a;
            }
        }
        Ok(best)
    }

    pub fn snapshot(&self) -> ReferencePolicy {
        ReferencePolicy(self.clone())
    }

    /// True if both policies assign bit-identical logits to every node either
    /// of them has touched and share the same base.
    pub fn same_parameters(&self, other: &Policy) -> bool {
        self.max_abs_diff(other) == Some(0.0)
    }

    /// Largest coordinate difference over nodes touched by either policy, or
    /// `None` if the bases differ.
    pub fn max_abs_diff(&self, other: &Policy) -> Option<f64> {
        if self.base != other.base || self.env.fingerprint() != other.env.fingerprint() {
            return None;
        }
        let mut worst = 0.0f64;
        for node in self.overrides.keys().chain(other.overrides.keys()) {
            let arity = self.env.arity(*node);
            let a = self.logits_unchecked(*node, arity);
            let b = other.logits_unchecked(*node, arity);
            for (x, y) in a.iter().zip(&b) {
                worst = worst.max((x - y).abs());
            }
        }
        Some(worst)
    }

    pub fn to_checkpoint(&self) -> PolicyCheckpoint {
        PolicyCheckpoint {
            format_version: CHECKPOINT_VERSION,
            env_name: self.env.name().to_string(),
            env_fingerprint: format!("{:016x}", self.env.fingerprint()),
            base: self.base,
            logits: self.overrides.clone(),
        }
    }

    pub fn from_checkpoint(env: Arc<Environment>, ckpt: &PolicyCheckpoint) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint format_version {}",
                ckpt.format_version
            )));
        }
        let expected = format!("{:016x}", env.fingerprint());
        if ckpt.env_fingerprint != expected {
            return Err(Error::Format(format!(
                "checkpoint bound to environment {} but got {expected}",
                ckpt.env_fingerprint
            )));
        }
        if ckpt.base == BaseLogits::Bundled && !env.has_bundled_policy() {
            return Err(Error::Format("bundled base on an environment without one".into()));
        }
        let mut policy = Policy { env, base: ckpt.base, overrides: BTreeMap::new() };
        for (node, logits) in &ckpt.logits {
            policy.set_logits(*node, logits)?;
        }
        Ok(policy)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(env: Arc<Environment>, path: impl AsRef<Path>) -> Result<Self> {
        let ckpt: PolicyCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_checkpoint(env, &ckpt)
    }
}

impl ReferencePolicy {
    pub fn policy(&self) -> &Policy {
        &self.0
    }

    pub fn snapshot(&self) -> ReferencePolicy {
        self.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub format_version: u32,
    pub env_name: String,
    pub env_fingerprint: String,
    base: BaseLogits,
    pub logits: BTreeMap<NodeId, Vec<f64>>,
}

/// Rolls out from the root, or continues a parent's prefix, until a leaf.
pub fn sample_trajectory(
    policy: &Policy,
    prompt_id: u32,
    rng: &mut impl UniformSource,
    start: Start<'_>,
) -> Result<Trajectory> {
    let env = policy.env();
    let (mut node, mut actions, mut logprobs, prefix_len, origin) = match start {
        Start::Root => (env.root(), Vec::new(), Vec::new(), 0, Origin::Main),
        Start::Prefix { parent, prefix_len } => {
            let node = parent.node_at(prefix_len).ok_or_else(|| {
                Error::domain(format!(
                    "prefix length {prefix_len} exceeds parent length {}",
                    parent.len()
                ))
            })?;
            if env.is_leaf(node) {
                return Err(Error::Terminal(node));
            }
            (
                node,
                parent.actions[..prefix_len].to_vec(),
                parent.behavior_logprobs[..prefix_len].to_vec(),
                prefix_len,
                Origin::Auxiliary,
            )
        }
    };
    loop {
        let arity = env.arity(node);
        if arity == 0 {
            break;
        }
        let logits = policy.logits_unchecked(node, arity);
        let probs = softmax(&logits);
        let a = categorical(&probs, rng.next_uniform()?);
        actions.push(Token { node, action: a as u16 });
        logprobs.push(log_softmax_at(&logits, a));
        node = env.child_unchecked(node, a);
    }
    let reward = env.terminal_reward(node)?;
    Ok(Trajectory {
        prompt_id,
        actions,
        behavior_logprobs: logprobs,
        reward: Some(reward),
        origin,
        prefix_len,
        leaf: Some(node),
    })
}

/// Deterministic argmax rollout from the root.
pub fn greedy_rollout(policy: &Policy) -> Result<Trajectory> {
    let env = policy.env();
    let mut node = env.root();
    let mut actions = Vec::new();
    let mut logprobs = Vec::new();
    while !env.is_leaf(node) {
        let a = policy.greedy_action(node)?;
        logprobs.push(policy.log_prob_action(node, a)?);
        actions.push(Token { node, action: a as u16 });
        node = env.child_unchecked(node, a);
    }
    Ok(Trajectory {
        prompt_id: 0,
        actions,
        behavior_logprobs: logprobs,
        reward: Some(env.terminal_reward(node)?),
        origin: Origin::Main,
        prefix_len: 0,
        leaf: Some(node),
    })
}
