//! Tree serialization and bundled fixtures.
//!
//! The document lists every node once with its ordered children, an optional
//! correctness flag (leaves only) and, for fixtures that ship a reference
//! policy, one probability per outgoing edge.
//!
//! ```json
//! { "format_version": 1, "name": "tiny", "root": "r",
//!   "nodes": [ { "id": "r", "children": ["x", "y"], "probs": [0.25, 0.75] },
//!              { "id": "x", "correct": true }, { "id": "y" } ] }
//! ```

use std::collections::{HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Environment, NodeId, DEFAULT_LEAF_CAP};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

pub const FIXTURE_NAMES: &[&str] = &["appendix-a"];

const APPENDIX_A: &str = include_str!("../../fixtures/appendix-a.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeDocument {
    pub format_version: u32,
    pub name: String,
    pub root: String,
    pub nodes: Vec<NodeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub correct: bool,
}

/// Loads a named fixture bundled with the crate.
pub fn load_fixture(name: &str) -> Result<Environment> {
    match name {
        "appendix-a" => TreeDocument::parse(APPENDIX_A)?.to_environment(),
        other => Err(Error::NotFound(format!("fixture '{other}'"))),
    }
}

/// One quoted quantity of a fixture, recomputed from the bundled policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureCheck {
    pub quantity: String,
    pub expected: f64,
    pub actual: f64,
}

impl FixtureCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        (self.actual - self.expected).abs() <= tolerance
    }
}

/// Recomputes the quoted probabilities of a bundled fixture.
pub fn verify_fixture(name: &str) -> Result<Vec<FixtureCheck>> {
    use crate::env::oracle::reach_probability;
    use crate::policy::{init_policy, InitMode};
    let env = std::sync::Arc::new(load_fixture(name)?);
    let policy = init_policy(env.clone(), InitMode::FixtureMatched)?;
    let node = |label: &str| {
        env.find_label(label).ok_or_else(|| Error::NotFound(format!("node {label} in {name}")))
    };
    let reach = |label: &str| reach_probability(&policy, node(label)?);
    let check = |quantity: &str, expected: f64, actual: f64| FixtureCheck {
        quantity: quantity.into(),
        expected,
        actual,
    };
    match name {
        "appendix-a" => Ok(vec![
            check("reach(M)", 0.032, reach("M")?),
            check("P(O | C)", 0.08, reach("O")? / reach("C")?),
            check("P(F)", 0.24, reach("F")?),
            check("P(G)", 0.2, reach("G")?),
        ]),
        other => Err(Error::NotFound(format!("fixture '{other}'"))),
    }
}

impl TreeDocument {
    pub fn parse(text: &str) -> Result<Self> {
        let doc: TreeDocument = serde_json::from_str(text)?;
        if doc.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                doc.format_version
            )));
        }
        Ok(doc)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Builds the environment. Node ids are assigned breadth-first from the
    /// root, so the root is always node 0.
    pub fn to_environment(&self) -> Result<Environment> {
        let by_label: HashMap<&str, &NodeRecord> =
            self.nodes.iter().map(|n| (n.id.as_str(), n)).collect();
        if by_label.len() != self.nodes.len() {
            return Err(Error::Format("duplicate node id".into()));
        }
        if !by_label.contains_key(self.root.as_str()) {
            return Err(Error::Format(format!("root '{}' not listed", self.root)));
        }
        let with_probs = self.nodes.iter().filter(|n| n.probs.is_some()).count();
        let internal = self.nodes.iter().filter(|n| !n.children.is_empty()).count();
        let bundled = with_probs > 0;
        if bundled && with_probs != internal {
            return Err(Error::Format(
                "either every internal node carries probs or none does".into(),
            ));
        }

        let mut order: Vec<&str> = Vec::with_capacity(self.nodes.len());
        let mut ids: HashMap<&str, u32> = HashMap::new();
        let mut queue = VecDeque::from([self.root.as_str()]);
        ids.insert(self.root.as_str(), 0);
        while let Some(label) = queue.pop_front() {
            order.push(label);
            for c in &by_label[label].children {
                let c = c.as_str();
                if !by_label.contains_key(c) {
                    return Err(Error::Format(format!("unknown child '{c}'")));
                }
                if ids.contains_key(c) {
                    return Err(Error::Format(format!("node '{c}' reached twice")));
                }
                ids.insert(c, ids.len() as u32);
                queue.push_back(c);
            }
        }
        if order.len() != self.nodes.len() {
            return Err(Error::Format("nodes unreachable from root".into()));
        }

        let children: Vec<Vec<NodeId>> = order
            .iter()
            .map(|l| by_label[l].children.iter().map(|c| NodeId(ids[c.as_str()])).collect())
            .collect();
        let correct: Vec<NodeId> = order
            .iter()
            .filter(|l| by_label[**l].correct)
            .map(|l| NodeId(ids[l]))
            .collect();
        let probs = bundled.then(|| {
            order
                .iter()
                .map(|l| by_label[l].probs.clone().unwrap_or_default())
                .collect()
        });
        let labels = order.iter().map(|s| s.to_string()).collect();
        Environment::from_explicit(
            self.name.clone(),
            children,
            &correct,
            Some(labels),
            probs,
            DEFAULT_LEAF_CAP,
        )
    }
}

impl Environment {
    /// Serializes the tree. Complete trees are expanded node by node, so this
    /// is meant for small instances.
    pub fn to_document(&self) -> TreeDocument {
        let nodes = (0..self.node_count() as u32)
            .map(NodeId)
            .map(|n| NodeRecord {
                id: self.label(n),
                children: self.children(n).map(|c| self.label(c)).collect(),
                probs: if self.is_leaf(n) {
                    None
                } else {
                    self.bundled_probs(n).map(<[f64]>::to_vec)
                },
                correct: self.is_leaf(n) && self.is_correct(n),
            })
            .collect();
        TreeDocument {
            format_version: FORMAT_VERSION,
            name: self.name().to_string(),
            root: self.label(self.root()),
            nodes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::build_planted_tree;

    #[test]
    fn appendix_a_shape() {
        let env = load_fixture("appendix-a").unwrap();
        assert_eq!(env.node_count(), 15);
        let correct: Vec<String> =
            env.correct_leaves().into_iter().map(|n| env.label(n)).collect();
        let mut sorted = correct.clone();
        sorted.sort();
        assert_eq!(sorted, ["F", "G", "J", "M", "O"]);
        let a = env.find_label("A").unwrap();
        let b = env.find_label("B").unwrap();
        assert_eq!(env.step(a, 0).unwrap(), b);
        let n = env.find_label("N").unwrap();
        assert_eq!(env.terminal_reward(n).unwrap().value(), 0.0);
        let f = env.find_label("F").unwrap();
        assert_eq!(env.terminal_reward(f).unwrap().value(), 1.0);
    }

    #[test]
    fn unknown_fixture() {
        assert!(matches!(load_fixture("bogus"), Err(Error::NotFound(_))));
    }

    #[test]
    fn document_round_trip() {
        let env = load_fixture("appendix-a").unwrap();
        let doc = env.to_document();
        let text = doc.to_json().unwrap();
        let back = TreeDocument::parse(&text).unwrap();
        assert_eq!(back, doc);
        let env2 = back.to_environment().unwrap();
        assert_eq!(env2.fingerprint(), env.fingerprint());

        let planted = build_planted_tree(3, 2, 0.5, 4).unwrap();
        let again = planted.to_document().to_environment().unwrap();
        assert_eq!(again.correct_leaves(), planted.correct_leaves());
    }

    #[test]
    fn rejects_wrong_version_and_bad_probs() {
        let text = APPENDIX_A.replace("\"format_version\": 1", "\"format_version\": 2");
        assert!(matches!(TreeDocument::parse(&text), Err(Error::Format(_))));
        let text = APPENDIX_A.replace("[0.6, 0.4]", "[0.6, 0.5]");
        assert!(TreeDocument::parse(&text).unwrap().to_environment().is_err());
    }

    #[test]
    fn verification_reproduces_quoted_values() {
        let checks = verify_fixture("appendix-a").unwrap();
        assert_eq!(checks.len(), 4);
        assert!(checks.iter().all(|c| c.passed(1e-12)), "{checks:?}");
        assert!(matches!(verify_fixture("bogus"), Err(Error::NotFound(_))));
    }
}
