//! Exact enumeration oracles.
//!
//! `exact_success_probability` and `reach_probability` are the plain
//! definitions and serve as ground truth. [`ExactEvaluator`] computes the same
//! success probability but only descends into subtrees the policy has touched,
//! which is what makes per-step evaluation affordable on trees with 16M leaves.

use std::collections::HashSet;

use super::{Environment, NodeId, DEFAULT_LEAF_CAP};
use crate::error::{Error, Result};
use crate::policy::{shannon_entropy, softmax, Policy};

fn subtree_leaves(env: &Environment, node: NodeId) -> u64 {
    if let Some((range, _)) = env.complete_subtree_stats(node) {
        return range.len() as u64;
    }
    let mut count = 0;
    let mut stack = vec![node];
    while let Some(n) = stack.pop() {
        if env.is_leaf(n) {
            count += 1;
        } else {
            stack.extend(env.children(n));
        }
    }
    count
}

/// Product of action probabilities along the root-to-`node` path.
pub fn reach_probability(policy: &Policy, node: NodeId) -> Result<f64> {
    let env = policy.env();
    if !env.contains(node) {
        return Err(Error::NotFound(format!("node {node}")));
    }
    let mut p = 1.0;
    for (parent, action) in env.path_to(node) {
        p *= policy.action_distribution(parent)?[action];
    }
    Ok(p)
}

/// Probability that a rollout started at `node` ends on a correct leaf, by
/// depth-first enumeration of the subtree.
pub fn exact_success_probability(policy: &Policy, node: NodeId) -> Result<f64> {
    let env = policy.env();
    if !env.contains(node) {
        return Err(Error::NotFound(format!("node {node}")));
    }
    let leaves = subtree_leaves(env, node);
    if leaves > DEFAULT_LEAF_CAP {
        return Err(Error::Size { leaves: leaves as u128, cap: DEFAULT_LEAF_CAP });
    }
    Ok(dfs(policy, env, node))
}

fn dfs(policy: &Policy, env: &Environment, node: NodeId) -> f64 {
    let arity = env.arity(node);
    if arity == 0 {
        return if env.is_correct(node) { 1.0 } else { 0.0 };
    }
    let probs = softmax(&policy.logits_unchecked(node, arity));
    (0..arity)
        .map(|a| probs[a] * dfs(policy, env, env.child_unchecked(node, a)))
        .sum()
}

/// Success-probability evaluator that reuses the untouched base policy.
///
/// For a zero-logit base on a complete tree the success probability of an
/// untouched subtree is the fraction of correct leaves in it, read straight
/// from the leaf bitmap. Other bases get per-node tables computed once.
///
/// The same traversal also yields the expected summed action entropy and the
/// expected number of tokens of a rollout, so the mean entropy per generated
/// token is exact as well.
#[derive(Debug, Clone)]
pub struct ExactEvaluator {
    fingerprint: u64,
    tables: Option<BaseTables>,
}

#[derive(Debug, Clone)]
struct BaseTables {
    success: Vec<f64>,
    entropy: Vec<f64>,
    /// Only for irregular trees; complete trees use the remaining depth.
    length: Option<Vec<f64>>,
}

/// Expectations of one rollout started at a node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutExpectation {
    pub success: f64,
    /// Expected sum of per-token action entropies (nats).
    pub entropy_sum: f64,
    pub length: f64,
}

impl RolloutExpectation {
    /// Mean action entropy per generated token.
    pub fn mean_entropy(&self) -> f64 {
        if self.length > 0.0 {
            self.entropy_sum / self.length
        } else {
            0.0
        }
    }
}

fn touched_closure(policy: &Policy) -> HashSet<NodeId> {
    let env = policy.env();
    let mut touched = HashSet::new();
    for n in policy.touched_nodes() {
        let mut cur = Some(n);
        while let Some(c) = cur {
            if !touched.insert(c) {
                break;
            }
            cur = env.parent(c);
        }
    }
    touched
}

impl ExactEvaluator {
    /// Prepares an evaluator for `policy`'s base. Only overrides may change
    /// afterwards; a policy with a different base needs a new evaluator.
    pub fn new(policy: &Policy) -> Self {
        let env = policy.env();
        let tables = if policy.base_is_uniform() && env.is_complete() {
            None
        } else {
            let base = {
                let mut p = policy.clone();
                p.clear_overrides();
                p
            };
            let n = env.node_count();
            let mut success = vec![0.0; n];
            let mut entropy = vec![0.0; n];
            let mut length = (!env.is_complete()).then(|| vec![0.0; n]);
            // Children always carry larger ids than their parent.
            for id in (0..n as u32).rev() {
                let node = NodeId(id);
                let arity = env.arity(node);
                let i = id as usize;
                if arity == 0 {
                    success[i] = if env.is_correct(node) { 1.0 } else { 0.0 };
                    continue;
                }
                let probs = softmax(&base.logits_unchecked(node, arity));
                let (mut s, mut h, mut l) = (0.0, shannon_entropy(&probs), 1.0);
                for a in 0..arity {
                    let c = env.child_unchecked(node, a).index();
                    s += probs[a] * success[c];
                    h += probs[a] * entropy[c];
                    if let Some(len) = &length {
                        l += probs[a] * len[c];
                    }
                }
                success[i] = s;
                entropy[i] = h;
                if let Some(len) = &mut length {
                    len[i] = l;
                }
            }
            Some(BaseTables { success, entropy, length })
        };
        Self { fingerprint: env.fingerprint(), tables }
    }

    fn base_value(&self, env: &Environment, node: NodeId) -> RolloutExpectation {
        match &self.tables {
            Some(t) => RolloutExpectation {
                success: t.success[node.index()],
                entropy_sum: t.entropy[node.index()],
                length: match &t.length {
                    Some(l) => l[node.index()],
                    None => (env.depth() - env.node_depth(node)) as f64,
                },
            },
            None => {
                let (range, count) = env.complete_subtree_stats(node).expect("complete tree");
                let remaining = (env.depth() - env.node_depth(node)) as f64;
                RolloutExpectation {
                    success: count as f64 / range.len() as f64,
                    entropy_sum: remaining * (env.max_arity() as f64).ln(),
                    length: remaining,
                }
            }
        }
    }

    pub fn success(&self, policy: &Policy, node: NodeId) -> f64 {
        self.expectation(policy, node).success
    }

    pub fn root_success(&self, policy: &Policy) -> f64 {
        self.success(policy, policy.env().root())
    }

    pub fn expectation(&self, policy: &Policy, node: NodeId) -> RolloutExpectation {
        let env = policy.env();
        debug_assert_eq!(env.fingerprint(), self.fingerprint);
        let touched = touched_closure(policy);
        self.expect_in(policy, env, node, &touched)
    }

    pub fn root_expectation(&self, policy: &Policy) -> RolloutExpectation {
        self.expectation(policy, policy.env().root())
    }

    fn expect_in(
        &self,
        policy: &Policy,
        env: &Environment,
        node: NodeId,
        touched: &HashSet<NodeId>,
    ) -> RolloutExpectation {
        let arity = env.arity(node);
        if arity == 0 {
            let success = if env.is_correct(node) { 1.0 } else { 0.0 };
            return RolloutExpectation { success, entropy_sum: 0.0, length: 0.0 };
        }
        if !touched.contains(&node) {
            return self.base_value(env, node);
        }
        let probs = softmax(&policy.logits_unchecked(node, arity));
        let mut out =
            RolloutExpectation { success: 0.0, entropy_sum: shannon_entropy(&probs), length: 1.0 };
        for a in 0..arity {
            let c = self.expect_in(policy, env, env.child_unchecked(node, a), touched);
            out.success += probs[a] * c.success;
            out.entropy_sum += probs[a] * c.entropy_sum;
            out.length += probs[a] * c.length;
        }
        out
    }
}

/// Probability that at least one of `branches` rollouts from a pivot at each
/// token depth succeeds, averaged over the pivot states of failed root
/// rollouts.
///
/// Entry `d` (for `d` in `1..depth`) weights every node `n` at depth `d` by
/// `reach(n) * (1 - s(n))`, the probability that a root rollout passes
/// through `n` and fails, and averages `1 - (1 - s(n))^branches`. Entries with
/// no failing mass are `None`.
pub fn recoverability_by_depth(
    policy: &Policy,
    evaluator: &ExactEvaluator,
    branches: u32,
) -> Vec<Option<f64>> {
    let env = policy.env();
    let depth = env.depth() as usize;
    let mut num = vec![0.0; depth];
    let mut den = vec![0.0; depth];
    let touched = touched_closure(policy);
    let mut stack = vec![(env.root(), 1.0f64, 0usize)];
    while let Some((node, reach, d)) = stack.pop() {
        let arity = env.arity(node);
        if arity == 0 {
            continue;
        }
        if d >= 1 {
            let s = evaluator.expect_in(policy, env, node, &touched).success;
            let fail = reach * (1.0 - s);
            num[d] += fail * (1.0 - (1.0 - s).powi(branches as i32));
            den[d] += fail;
        }
        let probs = softmax(&policy.logits_unchecked(node, arity));
        for a in 0..arity {
            stack.push((env.child_unchecked(node, a), reach * probs[a], d + 1));
        }
    }
    (0..depth)
        .map(|d| (d >= 1 && den[d] > 0.0).then(|| num[d] / den[d]))
        .collect()
}
