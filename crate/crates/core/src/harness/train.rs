use std::fs::File;
use std::io::{BufWriter, Write};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::env::{build_planted_tree, load_fixture, Environment, ExactEvaluator};
use crate::error::{Error, Result};
use crate::estimator::{init_estimator, EstimatorState};
use crate::optim::{
    accumulate, apply_gradients, keep, aux_items, global_advantages, local_advantages, main_items,
    standardize, AdvantageSet, AdvantageStream, GradientAccumulator, GradientMap, Scored,
};
use crate::policy::{init_policy, InitMode, Policy, PolicyCheckpoint, ReferencePolicy};
use crate::rng::derive_seed;
use crate::sampler::{
    branch, pivot_distribution, sample_distinct_pivots, sample_root_chains, segment, AuxiliarySet,
    ConstantRecoverability, Group, PivotPlan, RolloutRecord, Streams,
};

use super::config::{EnvSpec, RunConfig, Strategy};
use super::eval::evaluate;
use super::metrics::{export_metrics, MetricsFormat, MetricsRecord};

pub const RUN_CHECKPOINT_VERSION: u32 = 1;

/// Everything about one prompt that does not change during training.
#[derive(Debug)]
pub struct PromptSetup {
    pub env: Arc<Environment>,
    pub init: InitMode,
    evaluator: OnceLock<Arc<ExactEvaluator>>,
}

impl PromptSetup {
    pub fn new(env: Arc<Environment>, init: InitMode) -> Self {
        Self { env, init, evaluator: OnceLock::new() }
    }

    pub fn initial_policy(&self) -> Result<Policy> {
        init_policy(self.env.clone(), self.init)
    }

    /// Built on first use and shared by every run holding this setup.
    pub fn evaluator(&self) -> Result<Arc<ExactEvaluator>> {
        if let Some(e) = self.evaluator.get() {
            return Ok(e.clone());
        }
        let e = Arc::new(ExactEvaluator::new(&self.initial_policy()?));
        Ok(self.evaluator.get_or_init(|| e).clone())
    }
}

/// Environments and initial policies for every prompt of a run.
#[derive(Debug, Clone)]
pub struct RunSetup {
    pub prompts: Vec<Arc<PromptSetup>>,
}

fn prompt_seed(base: u64, prompt: usize) -> u64 {
    if prompt == 0 {
        base
    } else {
        derive_seed(base, &[prompt as u64])
    }
}

impl RunSetup {
    /// Prompt 0 uses the configured (or run) seeds directly; later prompts
    /// derive theirs from them.
    pub fn build(config: &RunConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let init = config.init.resolve(seed);
        let prompts = (0..config.prompts_per_step)
            .map(|p| {
                let env = match &config.env {
                    EnvSpec::Planted { depth, arity, correct_fraction, seed: env_seed } => {
                        let s = prompt_seed(env_seed.unwrap_or(seed), p);
                        build_planted_tree(*depth, *arity, *correct_fraction, s)?
                    }
                    EnvSpec::Fixture { name } => load_fixture(name)?,
                };
                let init = match init {
                    InitMode::SeededRandom { scale, seed } => {
                        InitMode::SeededRandom { scale, seed: prompt_seed(seed, p) }
                    }
                    other => other,
                };
                Ok(Arc::new(PromptSetup::new(Arc::new(env), init)))
            })
            .collect::<Result<_>>()?;
        Ok(Self { prompts })
    }
}

/// Everything one step sampled for one prompt.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub group: Group,
    pub aux_sets: Vec<AuxiliarySet>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Window {
    main_rollouts: u64,
    main_successes: u64,
    unrecoverable: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCheckpoint {
    pub format_version: u32,
    pub seed: u64,
    pub step: u64,
    pub policies: Vec<PolicyCheckpoint>,
    pub estimator: EstimatorState,
}

impl RunCheckpoint {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let ckpt: RunCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ckpt.format_version != RUN_CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported run checkpoint format_version {}",
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }
}

/// Result of a finished run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub seed: u64,
    pub log: Vec<MetricsRecord>,
    pub checkpoint: RunCheckpoint,
    pub steps: u64,
    pub rollouts: u64,
}

impl RunOutput {
    pub fn final_eval(&self) -> f64 {
        self.log.last().map_or(f64::NAN, |r| r.eval_success_rate)
    }

    pub fn final_entropy(&self) -> f64 {
        self.log.last().map_or(f64::NAN, |r| r.entropy)
    }
}

/// The training loop, one step at a time.
pub struct Trainer {
    config: RunConfig,
    seed: u64,
    setup: RunSetup,
    policies: Vec<Policy>,
    references: Vec<ReferencePolicy>,
    estimator: EstimatorState,
    step: u64,
    rollouts: u64,
    tokens_main: u64,
    tokens_aux: u64,
    window: Window,
    log: Vec<MetricsRecord>,
    rollout_log: Option<Box<dyn Write + Send>>,
    started: Instant,
}

impl Trainer {
    pub fn new(config: RunConfig, seed: u64) -> Result<Self> {
        let setup = RunSetup::build(&config, seed)?;
        Self::with_setup(config, seed, setup)
    }

    pub fn with_setup(config: RunConfig, seed: u64, setup: RunSetup) -> Result<Self> {
        config.validate()?;
        if setup.prompts.len() != config.prompts_per_step {
            return Err(Error::Config("setup does not match prompts_per_step".into()));
        }
        let policies: Vec<Policy> =
            setup.prompts.iter().map(|p| p.initial_policy()).collect::<Result<_>>()?;
        let references = policies.iter().map(Policy::snapshot).collect();
        let estimator = init_estimator(config.estimator.capacity)?;
        let rollout_log: Option<Box<dyn Write + Send>> = match &config.rollout_log {
            Some(path) => Some(Box::new(BufWriter::new(File::create(path)?))),
            None => None,
        };
        Ok(Self {
            config,
            seed,
            setup,
            policies,
            references,
            estimator,
            step: 0,
            rollouts: 0,
            tokens_main: 0,
            tokens_aux: 0,
            window: Window::default(),
            log: Vec::new(),
            rollout_log,
            started: Instant::now(),
        })
    }

    /// Sends rollout records to `out` instead of the configured file.
    pub fn set_rollout_log(&mut self, out: Box<dyn Write + Send>) {
        self.rollout_log = Some(out);
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn policies(&self) -> &[Policy] {
        &self.policies
    }

    pub fn estimator(&self) -> &EstimatorState {
        &self.estimator
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn rollouts(&self) -> u64 {
        self.rollouts
    }

    pub fn log(&self) -> &[MetricsRecord] {
        &self.log
    }

    pub fn tokens(&self) -> (u64, u64) {
        (self.tokens_main, self.tokens_aux)
    }

    fn budget_left(&self) -> bool {
        self.config.rollout_budget.is_none_or(|b| self.rollouts < b)
    }

    /// True while another step is allowed.
    pub fn can_step(&self) -> bool {
        (self.step as usize) < self.config.steps && self.budget_left()
    }

    /// Samples main chains and, per strategy, auxiliary sets for one prompt.
    fn sample_prompt(&mut self, prompt: usize, streams: &Streams) -> Result<StepBatch> {
        let policy = &self.policies[prompt];
        let pid = prompt as u32;
        let cfg = &self.config;
        let g = cfg.main_chains();
        let mut chains = sample_root_chains(policy, pid, 0..g, streams)?;
        if let Strategy::RootOnlyExtra { pivots, branches, extra } = cfg.strategy {
            let extra = extra.unwrap_or_else(|| {
                chains.iter().filter(|t| !t.succeeded()).count() * pivots * branches
            });
            chains.extend(sample_root_chains(policy, pid, g..g + extra, streams)?);
        }
        let group = Group { prompt_id: pid, trajectories: chains };
        let mut aux_sets = Vec::new();
        let Some((pivots, branches)) = cfg.strategy.branches_per_pivot() else {
            return Ok(StepBatch { group, aux_sets });
        };
        let all_parents = matches!(cfg.strategy, Strategy::ExpandAll { .. } | Strategy::TreeDispersed { .. });
        let uniform = matches!(cfg.strategy, Strategy::UniformPivot { .. } | Strategy::TreeDispersed { .. });
        for (i, parent) in group.trajectories.iter().enumerate() {
            if parent.succeeded() && !all_parents {
                continue;
            }
            let Some(index) = segment(parent, cfg.segment_len)? else { continue };
            let q = if uniform {
                pivot_distribution(&index, &ConstantRecoverability(0.5), 0.0)?
            } else {
                pivot_distribution(&index, &self.estimator, cfg.gamma)?
            };
            let mut rng = streams.pivot(pid, i);
            for (ordinal, t_star) in sample_distinct_pivots(&q, pivots, &mut rng)?.into_iter().enumerate() {
                let plan = PivotPlan::new(i, ordinal, &index, t_star)?;
                aux_sets.push(branch(policy, parent, plan, branches, streams, all_parents)?);
            }
        }
        Ok(StepBatch { group, aux_sets })
    }

    /// Runs one training step and returns what it sampled.
    pub fn step(&mut self) -> Result<Vec<StepBatch>> {
        let streams = Streams::new(self.seed, self.step);
        let batches: Vec<StepBatch> = (0..self.policies.len())
            .map(|p| self.sample_prompt(p, &streams))
            .collect::<Result<_>>()?;

        let cfg = self.config.clone();
        let optim = &cfg.optim;
        let pooled = matches!(cfg.strategy, Strategy::TreeDispersed { .. });
        let mut mains = Vec::with_capacity(batches.len());
        let mut auxes = Vec::with_capacity(batches.len());
        for (p, batch) in batches.iter().enumerate() {
            let policy = &self.policies[p];
            let reference = &self.references[p];
            let mut main = GradientAccumulator::new(optim.loss_norm);
            let mut aux = GradientAccumulator::new(optim.loss_norm);
            if pooled {
                // One baseline over main and branch rewards, prefixes included.
                let mut rewards = batch.group.rewards();
                for s in &batch.aux_sets {
                    rewards.extend(s.rewards());
                }
                let set = standardize(&rewards, AdvantageStream::Global);
                let mut items: Vec<Scored<'_>> = Vec::new();
                let trajectories = batch
                    .group
                    .trajectories
                    .iter()
                    .chain(batch.aux_sets.iter().flat_map(|s| s.branches.iter()));
                for (t, &a) in trajectories.zip(&set.values) {
                    if keep(a, &set, optim.advantage_filter) {
                        items.push(Scored { trajectory: t, advantage: a, from: 0 });
                    }
                }
                accumulate(policy, reference, &items, optim, &mut main)?;
            } else {
                let adv = [global_advantages(&batch.group)?];
                let items = main_items(std::slice::from_ref(&batch.group), &adv, optim)?;
                accumulate(policy, reference, &items, optim, &mut main)?;
                if optim.lambda != 0.0 && !batch.aux_sets.is_empty() {
                    let local: Vec<AdvantageSet> = batch.aux_sets.iter().map(local_advantages).collect();
                    let items = aux_items(&batch.aux_sets, &local, optim, true)?;
                    accumulate(policy, reference, &items, optim, &mut aux)?;
                }
            }
            mains.push(main);
            auxes.push(aux);
        }
        let main_den: usize = mains.iter().map(GradientAccumulator::denominator).sum();
        let aux_den: usize = auxes.iter().map(GradientAccumulator::denominator).sum();
        let grads: Vec<(GradientMap, GradientMap)> = mains
            .iter()
            .zip(&auxes)
            .map(|(m, a)| (m.gradient_over(main_den), a.gradient_over(aux_den)))
            .collect();
        // Validate every prompt before touching any policy.
        for (m, a) in &grads {
            for (node, g) in m.iter().chain(a.iter()) {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient at node {node} in step {}",
                        self.step
                    )));
                }
            }
        }
        for (policy, (m, a)) in self.policies.iter_mut().zip(grads) {
            apply_gradients(policy, m, &a, optim)?;
        }

        let trains = cfg.strategy.trains_estimator();
        for batch in &batches {
            let g = &batch.group;
            self.rollouts += g.size() as u64;
            self.tokens_main += g.token_count() as u64;
            self.window.main_rollouts += g.size() as u64;
            self.window.main_successes += g.successes() as u64;
            for s in &batch.aux_sets {
                self.rollouts += s.branches.len() as u64;
                self.tokens_aux += s.suffix_tokens() as u64;
                if !s.recovered() {
                    self.window.unrecoverable += 1;
                }
                if trains {
                    self.estimator.record(s.plan.normalized_depth, u8::from(s.recovery_label))?;
                }
            }
            if let Some(out) = self.rollout_log.as_mut() {
                for (i, t) in g.trajectories.iter().enumerate() {
                    RolloutRecord::main(self.step, i, t).write_line(out)?;
                }
                for s in &batch.aux_sets {
                    for r in RolloutRecord::aux(self.step, s) {
                        r.write_line(out)?;
                    }
                }
            }
        }
        if trains {
            let e = &cfg.estimator;
            self.estimator.tick(e.update_every, e.epochs, e.lr)?;
        }
        self.step += 1;
        Ok(batches)
    }

    /// Evaluates the current policies and appends a metrics row.
    pub fn record(&mut self) -> Result<MetricsRecord> {
        let n = self.policies.len() as f64;
        let (mut eval, mut entropy, mut length) = (0.0, 0.0, 0.0);
        for (p, policy) in self.policies.iter().enumerate() {
            let evaluator = self.setup.prompts[p].evaluator()?;
            let eval_seed = derive_seed(self.seed, &[crate::rng::EVAL, self.step, p as u64]);
            eval += evaluate(policy, self.config.eval, &evaluator, eval_seed)?;
            let x = evaluator.root_expectation(policy);
            entropy += x.mean_entropy();
            length += x.length;
        }
        let w = &self.window;
        let rec = MetricsRecord {
            step: self.step,
            train_success_rate: if w.main_rollouts == 0 {
                0.0
            } else {
                w.main_successes as f64 / w.main_rollouts as f64
            },
            eval_success_rate: eval / n,
            entropy: entropy / n,
            mean_length: length / n,
            unrecoverable_pivots: w.unrecoverable,
            tokens_main: self.tokens_main,
            tokens_aux: self.tokens_aux,
            estimator_w: self.estimator.w,
            estimator_b: self.estimator.b,
            wall_ms: if self.config.timing { self.started.elapsed().as_millis() as u64 } else { 0 },
        };
        self.window = Window::default();
        self.log.push(rec);
        Ok(rec)
    }

    pub fn checkpoint(&self) -> RunCheckpoint {
        RunCheckpoint {
            format_version: RUN_CHECKPOINT_VERSION,
            seed: self.seed,
            step: self.step,
            policies: self.policies.iter().map(Policy::to_checkpoint).collect(),
            estimator: self.estimator.clone(),
        }
    }

    /// Steps until the step cap or rollout budget, recording a row at
    /// step 0, every `eval_every` steps and at the end.
    pub fn run(mut self) -> Result<RunOutput> {
        if self.log.is_empty() {
            self.record()?;
        }
        while self.can_step() {
            self.step().map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("step {}: {m}", self.step)),
                other => other,
            })?;
            if self.step.is_multiple_of(self.config.eval_every as u64) || !self.can_step() {
                self.record()?;
            }
        }
        if let Some(out) = self.rollout_log.as_mut() {
            out.flush()?;
        }
        if let Some(path) = &self.config.metrics {
            export_metrics(&self.log, path, MetricsFormat::from_path(path))?;
        }
        Ok(RunOutput {
            seed: self.seed,
            checkpoint: self.checkpoint(),
            steps: self.step,
            rollouts: self.rollouts,
            log: self.log,
        })
    }
}

/// Trains one seed end to end.
pub fn run_training(config: &RunConfig, seed: u64) -> Result<RunOutput> {
    Trainer::new(config.clone(), seed)?.run()
}
