use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{DEFAULT_CAPACITY, DEFAULT_EPOCHS, DEFAULT_LR};
use crate::optim::OptimConfig;
use crate::policy::InitMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EnvSpec {
    Planted {
        depth: u32,
        arity: u32,
        correct_fraction: f64,
        /// Tree seed; defaults to the run seed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Fixture { name: String },
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec::Planted { depth: 12, arity: 4, correct_fraction: 1e-3, seed: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitSpec {
    #[default]
    Uniform,
    SeededRandom {
        scale: f64,
        /// Defaults to the run seed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    FixtureMatched,
}

impl InitSpec {
    pub fn resolve(&self, run_seed: u64) -> InitMode {
        match *self {
            InitSpec::Uniform => InitMode::Uniform,
            InitSpec::SeededRandom { scale, seed } => {
                InitMode::SeededRandom { scale, seed: seed.unwrap_or(run_seed) }
            }
            InitSpec::FixtureMatched => InitMode::FixtureMatched,
        }
    }
}

/// How each step spends rollouts beyond the `G` main chains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Strategy {
    /// Plain group sampling with `n` root rollouts.
    Grpo { n: usize },
    /// `pivots` pivots per failed chain drawn from `Q`, `branches` each.
    DeepGrpo { pivots: usize, branches: usize },
    /// Pivots drawn uniformly; the estimator is neither used nor trained.
    UniformPivot { pivots: usize, branches: usize },
    /// Like deep-grpo but also branches from successful chains.
    ExpandAll { pivots: usize, branches: usize },
    /// Extra root rollouts: `extra` if given, otherwise as many as deep-grpo
    /// with `pivots`/`branches` would spend on this step's failures.
    RootOnlyExtra {
        pivots: usize,
        branches: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        extra: Option<usize>,
    },
    /// Uniform distinct pivots on every chain, unmasked prefixes and one
    /// pooled baseline over main and branch rewards.
    TreeDispersed { pivots: usize, branches: usize },
}

impl Default for Strategy {
    fn default() -> Self {
        Strategy::DeepGrpo { pivots: 1, branches: 8 }
    }
}

impl Strategy {
    pub fn branches_per_pivot(&self) -> Option<(usize, usize)> {
        match *self {
            Strategy::Grpo { .. } | Strategy::RootOnlyExtra { .. } => None,
            Strategy::DeepGrpo { pivots, branches }
            | Strategy::UniformPivot { pivots, branches }
            | Strategy::ExpandAll { pivots, branches }
            | Strategy::TreeDispersed { pivots, branches } => Some((pivots, branches)),
        }
    }

    pub fn trains_estimator(&self) -> bool {
        matches!(self, Strategy::DeepGrpo { .. } | Strategy::ExpandAll { .. })
    }

    fn validate(&self) -> Result<()> {
        let (p, b) = match *self {
            Strategy::Grpo { n } => {
                return if n >= 2 {
                    Ok(())
                } else {
                    Err(Error::Config(format!("grpo needs n >= 2, got {n}")))
                };
            }
            Strategy::RootOnlyExtra { pivots, branches, .. } => (pivots, branches),
            other => other.branches_per_pivot().expect("branching strategy"),
        };
        if p == 0 || b == 0 {
            return Err(Error::Config(format!("pivots and branches must be >= 1 in {self}")));
        }
        Ok(())
    }
}

/// Compact names: `grpo:8`, `deep-grpo:p1b8`, `uniform-pivot:p1b8`,
/// `expand-all:p1b8`, `root-only:p1b8`, `root-only:+16`, `tree-dispersed:p4b2`.
impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unrecognized strategy '{s}'"));
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        let pb = |arg: &str| -> Result<(usize, usize)> {
            let rest = arg.strip_prefix(['p', 'P']).ok_or_else(bad)?;
            let (p, b) = rest.split_once(['b', 'B']).ok_or_else(bad)?;
            Ok((p.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
        };
        Ok(match kind {
            "grpo" => Strategy::Grpo { n: arg.parse().map_err(|_| bad())? },
            "deep-grpo" => {
                let (pivots, branches) = pb(arg)?;
                Strategy::DeepGrpo { pivots, branches }
            }
            "uniform-pivot" => {
                let (pivots, branches) = pb(arg)?;
                Strategy::UniformPivot { pivots, branches }
            }
            "expand-all" => {
                let (pivots, branches) = pb(arg)?;
                Strategy::ExpandAll { pivots, branches }
            }
            "tree-dispersed" => {
                let (pivots, branches) = pb(arg)?;
                Strategy::TreeDispersed { pivots, branches }
            }
            "root-only" => match arg.strip_prefix('+') {
                Some(n) => Strategy::RootOnlyExtra {
                    pivots: 1,
                    branches: 1,
                    extra: Some(n.parse().map_err(|_| bad())?),
                },
                None => {
                    let (pivots, branches) = pb(arg)?;
                    Strategy::RootOnlyExtra { pivots, branches, extra: None }
                }
            },
            _ => return Err(bad()),
        })
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Strategy::Grpo { n } => write!(f, "grpo:{n}"),
            Strategy::DeepGrpo { pivots, branches } => write!(f, "deep-grpo:p{pivots}b{branches}"),
            Strategy::UniformPivot { pivots, branches } => {
                write!(f, "uniform-pivot:p{pivots}b{branches}")
            }
            Strategy::ExpandAll { pivots, branches } => write!(f, "expand-all:p{pivots}b{branches}"),
            Strategy::RootOnlyExtra { extra: Some(n), .. } => write!(f, "root-only:+{n}"),
            Strategy::RootOnlyExtra { pivots, branches, extra: None } => {
                write!(f, "root-only:p{pivots}b{branches}")
            }
            Strategy::TreeDispersed { pivots, branches } => {
                write!(f, "tree-dispersed:p{pivots}b{branches}")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EvalMode {
    /// One argmax rollout; the rate is 0 or 1.
    #[default]
    Greedy,
    /// `n` sampled rollouts from a dedicated stream.
    Sample { n: usize },
    /// Enumeration-exact success probability.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub capacity: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Refit after this many training steps.
    pub update_every: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { capacity: DEFAULT_CAPACITY, epochs: DEFAULT_EPOCHS, lr: DEFAULT_LR, update_every: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvSpec,
    pub init: InitSpec,
    pub strategy: Strategy,
    /// Main chains per prompt (`G`); `grpo:n` overrides it.
    pub group_size: usize,
    pub gamma: f64,
    pub segment_len: usize,
    pub optim: OptimConfig,
    pub estimator: EstimatorConfig,
    pub steps: usize,
    /// Stop early once this many rollouts (main plus auxiliary) were drawn.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rollout_budget: Option<u64>,
    pub eval_every: usize,
    pub eval: EvalMode,
    /// Independent trees per step; each has its own logit table.
    pub prompts_per_step: usize,
    pub seeds: Vec<u64>,
    /// Write measured wall time; off by default so metrics files are
    /// reproducible byte for byte.
    pub timing: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rollout_log: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvSpec::default(),
            init: InitSpec::default(),
            strategy: Strategy::default(),
            group_size: 8,
            gamma: 2.0,
            segment_len: 2,
            optim: OptimConfig::default(),
            estimator: EstimatorConfig::default(),
            steps: 400,
            rollout_budget: None,
            eval_every: 20,
            eval: EvalMode::default(),
            prompts_per_step: 1,
            seeds: (0..10).collect(),
            timing: false,
            metrics: None,
            rollout_log: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.strategy.validate()?;
        let cfg = |m: String| Err(Error::Config(m));
        if self.group_size < 2 {
            return cfg(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if !self.gamma.is_finite() {
            return cfg(format!("gamma must be finite, got {}", self.gamma));
        }
        if self.segment_len == 0 {
            return cfg("segment_len must be >= 1".into());
        }
        if self.eval_every == 0 {
            return cfg("eval_every must be >= 1".into());
        }
        if self.prompts_per_step == 0 {
            return cfg("prompts_per_step must be >= 1".into());
        }
        if self.estimator.capacity == 0 || !(self.estimator.lr > 0.0) {
            return cfg("estimator capacity and lr must be positive".into());
        }
        if let EvalMode::Sample { n: 0 } = self.eval {
            return cfg("sample evaluation needs n >= 1".into());
        }
        match &self.env {
            EnvSpec::Planted { depth, arity, correct_fraction, .. } => {
                if *depth == 0 || *arity < 2 {
                    return cfg("planted trees need depth >= 1 and arity >= 2".into());
                }
                if !(*correct_fraction > 0.0 && *correct_fraction <= 1.0) {
                    return cfg(format!("correct_fraction must be in (0, 1], got {correct_fraction}"));
                }
                if matches!(self.init, InitSpec::FixtureMatched) {
                    return cfg("fixture-matched init needs a fixture environment".into());
                }
            }
            EnvSpec::Fixture { .. } => {
                if self.prompts_per_step != 1 {
                    return cfg("fixtures provide a single prompt".into());
                }
            }
        }
        if let InitSpec::SeededRandom { scale, .. } = self.init {
            if !(scale.is_finite() && scale >= 0.0) {
                return cfg(format!("init scale must be finite and >= 0, got {scale}"));
            }
        }
        Ok(())
    }

    /// Main chains sampled per prompt before any extra budget.
    pub fn main_chains(&self) -> usize {
        match self.strategy {
            Strategy::Grpo { n } => n,
            _ => self.group_size,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets a dotted key, e.g. `optim.lambda=0.5` or `strategy=deep-grpo:p2b4`.
    ///
    /// Values are read as TOML literals, falling back to plain strings;
    /// `strategy` also accepts the compact names of [`Strategy`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parsed = if key == "strategy" {
            let s: Strategy = value.parse()?;
            toml::Value::try_from(s).map_err(|e| Error::Config(e.to_string()))?
        } else {
            parse_value(value)
        };
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut cur = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = cur
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("'{key}' does not name a field")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), parsed);
                break;
            }
            cur = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        let updated: RunConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}={value}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }
}

fn parse_value(text: &str) -> toml::Value {
    let wrapped = format!("v = {text}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(text.into())),
        Err(_) => toml::Value::String(text.into()),
    }
}
