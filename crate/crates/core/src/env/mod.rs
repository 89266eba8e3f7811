//! Synthetic token-tree environments.
//!
//! An environment is a rooted tree: every internal node is a decision state
//! whose children are indexed by action (the "token"), and every leaf is a
//! finished response carrying reward 1 if it is marked correct and 0
//! otherwise. Transitions are deterministic given the action.
//!
//! Two shapes exist. Complete trees (from [`build_planted_tree`]) are stored
//! implicitly in level order, so node `n` has children `n * arity + 1 ..=
//! n * arity + arity` and the leaves under any node form a contiguous range.
//! Explicit trees (fixtures) store their child lists and may be irregular.

mod fixture;
mod oracle;

use std::fmt;
use std::ops::Range;

use bitvec::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, splitmix64};

pub use fixture::{
    load_fixture, verify_fixture, FixtureCheck, NodeRecord, TreeDocument, FIXTURE_NAMES,
    FORMAT_VERSION,
};
pub use oracle::{
    exact_success_probability, reach_probability, recoverability_by_depth, ExactEvaluator,
};

/// Largest number of leaves an environment may have. 4^12 fits exactly.
pub const DEFAULT_LEAF_CAP: u64 = 1 << 24;

const PLANT_STREAM: u64 = 0x504c_414e;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Terminal reward, always 0 or 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Reward(u8);

impl Reward {
    pub const INCORRECT: Reward = Reward(0);
    pub const CORRECT: Reward = Reward(1);

    pub fn new(value: u8) -> Result<Self> {
        Reward::try_from(value)
    }

    pub fn value(self) -> f64 {
        f64::from(self.0)
    }

    pub fn is_success(self) -> bool {
        self.0 == 1
    }
}

impl TryFrom<u8> for Reward {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        match value {
            0 | 1 => Ok(Reward(value)),
            v => Err(Error::domain(format!("reward must be 0 or 1, got {v}"))),
        }
    }
}

impl From<Reward> for u8 {
    fn from(r: Reward) -> u8 {
        r.0
    }
}

#[derive(Clone, Debug)]
enum Topology {
    Complete {
        arity: u32,
        first_leaf: u32,
        node_count: u32,
        /// `arity^k` for k in 0..=depth.
        powers: Vec<u64>,
        /// First node id on each level.
        level_start: Vec<u32>,
    },
    Explicit {
        children: Vec<Vec<NodeId>>,
        parent: Vec<Option<NodeId>>,
        node_depth: Vec<u32>,
    },
}

#[derive(Clone, Debug)]
pub struct Environment {
    name: String,
    topology: Topology,
    /// Complete trees: indexed by leaf offset. Explicit trees: by node id.
    correct: BitVec<u64, Lsb0>,
    depth: u32,
    leaf_count: u64,
    labels: Option<Vec<String>>,
    edge_probs: Option<Vec<Vec<f64>>>,
    fingerprint: u64,
}

/// Generates a complete `arity`-ary tree of the given depth whose leaves are
/// independently marked correct with probability `correct_fraction`.
///
/// Leaves are visited left to right, each consuming one uniform from the
/// seeded stream. If no leaf ends up correct, one more draw picks a leaf
/// uniformly and marks it.
pub fn build_planted_tree(
    depth: u32,
    arity: u32,
    correct_fraction: f64,
    seed: u64,
) -> Result<Environment> {
    build_planted_tree_with_cap(depth, arity, correct_fraction, seed, DEFAULT_LEAF_CAP)
}

pub fn build_planted_tree_with_cap(
    depth: u32,
    arity: u32,
    correct_fraction: f64,
    seed: u64,
    leaf_cap: u64,
) -> Result<Environment> {
    if depth == 0 {
        return Err(Error::domain("depth must be positive"));
    }
    if arity < 2 {
        return Err(Error::domain(format!("arity must be >= 2, got {arity}")));
    }
    if !(correct_fraction > 0.0 && correct_fraction <= 1.0) {
        return Err(Error::domain(format!(
            "correct_fraction must lie in (0, 1], got {correct_fraction}"
        )));
    }
    let leaves = (arity as u128).checked_pow(depth).unwrap_or(u128::MAX);
    if leaves > leaf_cap as u128 {
        return Err(Error::Size { leaves, cap: leaf_cap });
    }
    let leaves = leaves as u64;
    let mut powers = Vec::with_capacity(depth as usize + 1);
    let mut level_start = Vec::with_capacity(depth as usize + 1);
    let mut start = 0u64;
    let mut p = 1u64;
    for _ in 0..=depth {
        powers.push(p);
        level_start.push(start as u32);
        start += p;
        p *= arity as u64;
    }
    let node_count = start;
    if node_count > u32::MAX as u64 {
        return Err(Error::Size { leaves: leaves as u128, cap: leaf_cap });
    }
    let first_leaf = level_start[depth as usize];

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[PLANT_STREAM]));
    let mut correct = bitvec![u64, Lsb0; 0; leaves as usize];
    let mut any = false;
    for i in 0..leaves as usize {
        if rng.gen::<f64>() < correct_fraction {
            correct.set(i, true);
            any = true;
        }
    }
    if !any {
        let pick = rng.gen_range(0..leaves as usize);
        correct.set(pick, true);
    }

    let mut env = Environment {
        name: format!("planted-d{depth}-a{arity}-s{seed}"),
        topology: Topology::Complete {
            arity,
            first_leaf,
            node_count: node_count as u32,
            powers,
            level_start,
        },
        correct,
        depth,
        leaf_count: leaves,
        labels: None,
        edge_probs: None,
        fingerprint: 0,
    };
    env.fingerprint = env.compute_fingerprint();
    Ok(env)
}

impl Environment {
    /// Builds an explicit tree from child lists. Node 0 is the root.
    pub(crate) fn from_explicit(
        name: String,
        children: Vec<Vec<NodeId>>,
        correct_nodes: &[NodeId],
        labels: Option<Vec<String>>,
        edge_probs: Option<Vec<Vec<f64>>>,
        leaf_cap: u64,
    ) -> Result<Self> {
        let n = children.len();
        if n == 0 {
            return Err(Error::Format("tree has no nodes".into()));
        }
        let mut parent: Vec<Option<NodeId>> = vec![None; n];
        for (p, kids) in children.iter().enumerate() {
            if kids.len() == 1 {
                return Err(Error::Format(format!(
                    "internal node {p} has a single child; arity must be >= 2"
                )));
            }
            for &c in kids {
                if c.index() >= n {
                    return Err(Error::Format(format!("child {c} out of range")));
                }
                if c.index() == 0 {
                    return Err(Error::Format("root cannot be a child".into()));
                }
                if parent[c.index()].replace(NodeId(p as u32)).is_some() {
                    return Err(Error::Format(format!("node {c} has more than one parent")));
                }
            }
        }
        // Every non-root node has exactly one parent and the walk from the root
        // must reach all of them; otherwise there is a cycle or a detached part.
        let mut node_depth = vec![u32::MAX; n];
        node_depth[0] = 0;
        let mut stack = vec![NodeId(0)];
        let mut seen = 0usize;
        while let Some(v) = stack.pop() {
            seen += 1;
            for &c in &children[v.index()] {
                node_depth[c.index()] = node_depth[v.index()] + 1;
                stack.push(c);
            }
        }
        if seen != n {
            return Err(Error::Format(format!(
                "nodes unreachable from root: {} of {n}",
                n - seen
            )));
        }
        let leaf_count = children.iter().filter(|k| k.is_empty()).count() as u64;
        if leaf_count > leaf_cap {
            return Err(Error::Size { leaves: leaf_count as u128, cap: leaf_cap });
        }
        let mut correct = bitvec![u64, Lsb0; 0; n];
        for &c in correct_nodes {
            if c.index() >= n || !children[c.index()].is_empty() {
                return Err(Error::Format(format!("correct node {c} is not a leaf")));
            }
            correct.set(c.index(), true);
        }
        if let Some(probs) = &edge_probs {
            for (i, (p, kids)) in probs.iter().zip(&children).enumerate() {
                if p.len() != kids.len() {
                    return Err(Error::Format(format!(
                        "node {i}: {} probabilities for {} children",
                        p.len(),
                        kids.len()
                    )));
                }
                if !kids.is_empty() {
                    let s: f64 = p.iter().sum();
                    if p.iter().any(|&x| !(x > 0.0)) || (s - 1.0).abs() > 1e-9 {
                        return Err(Error::Format(format!(
                            "node {i}: edge probabilities must be positive and sum to 1"
                        )));
                    }
                }
            }
        }
        let depth = node_depth.iter().copied().max().unwrap_or(0);
        let mut env = Environment {
            name,
            topology: Topology::Explicit { children, parent, node_depth },
            correct,
            depth,
            leaf_count,
            labels,
            edge_probs,
            fingerprint: 0,
        };
        env.fingerprint = env.compute_fingerprint();
        Ok(env)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    /// Maximum root-to-leaf length in tokens.
    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn node_count(&self) -> usize {
        match &self.topology {
            Topology::Complete { node_count, .. } => *node_count as usize,
            Topology::Explicit { children, .. } => children.len(),
        }
    }

    pub fn leaf_count(&self) -> u64 {
        self.leaf_count
    }

    pub fn contains(&self, node: NodeId) -> bool {
        node.index() < self.node_count()
    }

    pub fn is_complete(&self) -> bool {
        matches!(self.topology, Topology::Complete { .. })
    }

    pub fn is_leaf(&self, node: NodeId) -> bool {
        match &self.topology {
            Topology::Complete { first_leaf, .. } => node.0 >= *first_leaf,
            Topology::Explicit { children, .. } => children[node.index()].is_empty(),
        }
    }

    /// Number of actions available at `node`; 0 for leaves.
    pub fn arity(&self, node: NodeId) -> usize {
        match &self.topology {
            Topology::Complete { arity, first_leaf, .. } => {
                if node.0 >= *first_leaf {
                    0
                } else {
                    *arity as usize
                }
            }
            Topology::Explicit { children, .. } => children[node.index()].len(),
        }
    }

    pub fn max_arity(&self) -> usize {
        match &self.topology {
            Topology::Complete { arity, .. } => *arity as usize,
            Topology::Explicit { children, .. } => {
                children.iter().map(Vec::len).max().unwrap_or(0)
            }
        }
    }

    /// Child reached by `action`, without validation.
    pub(crate) fn child_unchecked(&self, node: NodeId, action: usize) -> NodeId {
        match &self.topology {
            Topology::Complete { arity, .. } => NodeId(node.0 * arity + 1 + action as u32),
            Topology::Explicit { children, .. } => children[node.index()][action],
        }
    }

    /// Deterministic transition.
    pub fn step(&self, node: NodeId, action: usize) -> Result<NodeId> {
        if !self.contains(node) {
            return Err(Error::NotFound(format!("node {node}")));
        }
        let arity = self.arity(node);
        if arity == 0 {
            return Err(Error::Terminal(node));
        }
        if action >= arity {
            return Err(Error::domain(format!(
                "action {action} out of range for node {node} with arity {arity}"
            )));
        }
        Ok(self.child_unchecked(node, action))
    }

    pub fn children(&self, node: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.arity(node)).map(move |a| self.child_unchecked(node, a))
    }

    pub fn parent(&self, node: NodeId) -> Option<NodeId> {
        match &self.topology {
            Topology::Complete { arity, .. } => {
                (node.0 != 0).then(|| NodeId((node.0 - 1) / arity))
            }
            Topology::Explicit { parent, .. } => parent[node.index()],
        }
    }

    /// Index of `node` among its parent's children.
    pub fn action_into(&self, node: NodeId) -> Option<usize> {
        let p = self.parent(node)?;
        match &self.topology {
            Topology::Complete { arity, .. } => Some(((node.0 - 1) % arity) as usize),
            Topology::Explicit { children, .. } => {
                children[p.index()].iter().position(|&c| c == node)
            }
        }
    }

    pub fn node_depth(&self, node: NodeId) -> u32 {
        match &self.topology {
            Topology::Complete { level_start, .. } => {
                level_start.partition_point(|&s| s <= node.0) as u32 - 1
            }
            Topology::Explicit { node_depth, .. } => node_depth[node.index()],
        }
    }

    /// `(node, action)` pairs from the root down to `node` (exclusive).
    pub fn path_to(&self, node: NodeId) -> Vec<(NodeId, usize)> {
        let mut path = Vec::new();
        let mut cur = node;
        while let Some(p) = self.parent(cur) {
            path.push((p, self.action_into(cur).expect("child has an index")));
            cur = p;
        }
        path.reverse();
        path
    }

    pub fn is_correct(&self, leaf: NodeId) -> bool {
        match &self.topology {
            Topology::Complete { first_leaf, .. } => {
                leaf.0 >= *first_leaf && self.correct[(leaf.0 - first_leaf) as usize]
            }
            Topology::Explicit { .. } => self.correct[leaf.index()],
        }
    }

    pub fn terminal_reward(&self, leaf: NodeId) -> Result<Reward> {
        if !self.contains(leaf) {
            return Err(Error::NotFound(format!("node {leaf}")));
        }
        if !self.is_leaf(leaf) {
            return Err(Error::domain(format!("node {leaf} is not a leaf")));
        }
        Ok(if self.is_correct(leaf) { Reward::CORRECT } else { Reward::INCORRECT })
    }

    pub fn correct_leaves(&self) -> Vec<NodeId> {
        match &self.topology {
            Topology::Complete { first_leaf, .. } => {
                self.correct.iter_ones().map(|i| NodeId(first_leaf + i as u32)).collect()
            }
            Topology::Explicit { .. } => {
                self.correct.iter_ones().map(|i| NodeId(i as u32)).collect()
            }
        }
    }

    pub fn correct_count(&self) -> u64 {
        self.correct.count_ones() as u64
    }

    /// For complete trees, the leaf offsets under `node` and the number of
    /// correct ones among them.
    pub(crate) fn complete_subtree_stats(&self, node: NodeId) -> Option<(Range<usize>, u64)> {
        let Topology::Complete { powers, level_start, .. } = &self.topology else {
            return None;
        };
        let d = self.node_depth(node) as usize;
        let within = (node.0 - level_start[d]) as u64;
        let span = powers[self.depth as usize - d];
        let range = (within * span) as usize..((within + 1) * span) as usize;
        let count = self.correct[range.clone()].count_ones() as u64;
        Some((range, count))
    }

    pub fn label(&self, node: NodeId) -> String {
        match &self.labels {
            Some(l) => l[node.index()].clone(),
            None => node.0.to_string(),
        }
    }

    pub fn find_label(&self, label: &str) -> Option<NodeId> {
        match &self.labels {
            Some(l) => l.iter().position(|x| x == label).map(|i| NodeId(i as u32)),
            None => label.parse::<u32>().ok().map(NodeId).filter(|&n| self.contains(n)),
        }
    }

    /// Edge probabilities bundled with a fixture, if any.
    pub fn bundled_probs(&self, node: NodeId) -> Option<&[f64]> {
        self.edge_probs.as_ref().map(|p| p[node.index()].as_slice())
    }

    pub fn has_bundled_policy(&self) -> bool {
        self.edge_probs.is_some()
    }

    /// Stable hash of topology and correct set. Policies record it to refuse
    /// loading against a different tree.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Ids of every internal node, in id order.
    pub fn internal_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.node_count() as u32).map(NodeId).filter(move |&n| !self.is_leaf(n))
    }

    fn compute_fingerprint(&self) -> u64 {
        let mut h = splitmix64(self.node_count() as u64);
        match &self.topology {
            Topology::Complete { arity, .. } => {
                h = splitmix64(h ^ *arity as u64);
                h = splitmix64(h ^ self.depth as u64);
            }
            Topology::Explicit { children, .. } => {
                for kids in children {
                    h = splitmix64(h ^ kids.len() as u64);
                    for c in kids {
                        h = splitmix64(h ^ c.0 as u64);
                    }
                }
            }
        }
        for w in self.correct.as_raw_slice() {
            h = splitmix64(h ^ w);
        }
        h
    }
}
