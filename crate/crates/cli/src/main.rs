use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use pivotlab::env::{verify_fixture, ExactEvaluator, FIXTURE_NAMES};
use pivotlab::harness::metrics::write_metrics;
use pivotlab::harness::{
    evaluate, export_metrics, run_training, sweep, EvalMode, MetricsFormat, RunCheckpoint,
    RunConfig, RunSetup, SweepSummary,
};
use pivotlab::optim::gradcheck::{check_batch, random_frozen_batch, BatchShape};
use pivotlab::optim::{KlMode, OptimConfig};
use pivotlab::policy::Policy;
use pivotlab::Error;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "pivotlab", version, about = "Pivot-driven dense exploration on synthetic token trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one or more seeds and write metrics and checkpoints.
    Train(TrainArgs),
    /// Evaluate a saved run checkpoint.
    Eval(EvalArgs),
    /// Run a config over several values of one field.
    Sweep(SweepArgs),
    /// Dump or verify a bundled fixture.
    Fixture {
        #[command(subcommand)]
        action: FixtureAction,
    },
    /// Compare analytic and finite-difference gradients on random batches.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Run a single seed instead of the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (train, sweep) or file (fixture dump).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Metrics format: csv or jsonl.
    #[arg(long, global = true, default_value = "csv")]
    format: String,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply to missing fields.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override any field, e.g. `--set optim.lambda=0.5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Shorthand for `--set strategy=...`, e.g. deep-grpo:p1b8 or grpo:16.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Metrics file for a single-seed run.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> pivotlab::Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let named = [
            ("strategy", self.strategy.clone()),
            ("steps", self.steps.map(|v| v.to_string())),
            ("gamma", self.gamma.map(|v| format!("{v:?}"))),
            ("optim.lambda", self.lambda.map(|v| format!("{v:?}"))),
            ("optim.eta", self.eta.map(|v| format!("{v:?}"))),
            ("group_size", self.group_size.map(|v| v.to_string())),
            ("eval_every", self.eval_every.map(|v| v.to_string())),
        ];
        for (key, value) in named {
            if let Some(v) = value {
                config.set(key, &v)?;
            }
        }
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got '{kv}'")))?;
            config.set(k.trim(), v.trim())?;
        }
        if let Some(m) = &self.metrics {
            config.metrics = Some(m.clone());
        }
        Ok(config)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    common: Common,
    /// Run checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sampled rollouts for the sample mode.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    common: Common,
    /// Dotted field to vary, e.g. optim.lambda or strategy.
    #[arg(long)]
    axis: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
}

#[derive(Subcommand)]
enum FixtureAction {
    /// Write the fixture document as JSON.
    Dump {
        #[arg(default_value = "appendix-a")]
        name: String,
        #[command(flatten)]
        common: Common,
    },
    /// Recompute the fixture's quoted probabilities.
    Verify {
        #[arg(default_value = "appendix-a")]
        name: String,
        #[arg(long, default_value_t = 1e-12)]
        tolerance: f64,
    },
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    batches: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    /// Also check the exact-KL variant.
    #[arg(long)]
    thorough: bool,
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if broken_pipe(e) {
        return 0;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::Numeric(_)) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            if !broken_pipe(&e) {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        let io = c.downcast_ref::<std::io::Error>().or_else(|| match c.downcast_ref::<Error>() {
            Some(Error::Io(io)) => Some(io),
            _ => None,
        });
        io.is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
    })
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Fixture { action } => fixture(action),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn format_of(common: &Common) -> pivotlab::Result<MetricsFormat> {
    common.format.parse()
}

fn seeds(config: &RunConfig, common: &Common) -> Vec<u64> {
    common.seed.map_or_else(|| config.seeds.clone(), |s| vec![s])
}

#[derive(Serialize)]
struct RunInfo<'a> {
    seed: u64,
    steps: u64,
    rollouts: u64,
    final_eval: f64,
    wall_ms: u64,
    /// How budgets are compared across strategies.
    budget: &'a str,
}

const BUDGET_NOTE: &str =
    "strategies are compared at equal rollout counts (main chains plus auxiliary branches); wall_ms is recorded but not matched";

fn train(a: TrainArgs) -> anyhow::Result<u8> {
    let config = a.config.load()?;
    let format = format_of(&a.common)?;
    let seeds = seeds(&config, &a.common);
    if let Some(dir) = &a.common.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), config.to_toml()?)?;
    }
    let mut stdout = std::io::stdout().lock();
    for seed in seeds {
        let mut c = config.clone();
        if let Some(dir) = &a.common.out {
            c.rollout_log = c.rollout_log.map(|p| dir.join(p));
        }
        let started = std::time::Instant::now();
        let out = run_training(&c, seed)?;
        let wall_ms = started.elapsed().as_millis() as u64;
        match &a.common.out {
            Some(dir) => {
                let ext = format.extension();
                export_metrics(&out.log, dir.join(format!("metrics-seed-{seed}.{ext}")), format)?;
                out.checkpoint.save(dir.join(format!("checkpoint-seed-{seed}.json")))?;
                let info = RunInfo {
                    seed,
                    steps: out.steps,
                    rollouts: out.rollouts,
                    final_eval: out.final_eval(),
                    wall_ms,
                    budget: BUDGET_NOTE,
                };
                std::fs::write(
                    dir.join(format!("run-seed-{seed}.json")),
                    serde_json::to_string_pretty(&info)?,
                )?;
                writeln!(
                    stdout,
                    "seed {seed}: {} steps, {} rollouts, final eval {:.6}",
                    out.steps,
                    out.rollouts,
                    out.final_eval()
                )?;
            }
            None if c.metrics.is_none() => write_metrics(&out.log, &mut stdout, format)?,
            None => {}
        }
    }
    Ok(0)
}

#[derive(Serialize)]
struct EvalReport {
    prompt: usize,
    greedy: f64,
    sample: f64,
    exact: f64,
    entropy: f64,
    mean_length: f64,
}

fn eval(a: EvalArgs) -> anyhow::Result<u8> {
    let config = a.config.load()?;
    let ckpt = RunCheckpoint::load(&a.checkpoint)?;
    let seed = a.common.seed.unwrap_or(ckpt.seed);
    let setup = RunSetup::build(&config, seed)?;
    if setup.prompts.len() != ckpt.policies.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} policies but the config builds {} prompts",
            ckpt.policies.len(),
            setup.prompts.len()
        ))
        .into());
    }
    let mut stdout = std::io::stdout().lock();
    for (p, (prompt, pc)) in setup.prompts.iter().zip(&ckpt.policies).enumerate() {
        let policy = Policy::from_checkpoint(prompt.env.clone(), pc)?;
        let evaluator: Arc<ExactEvaluator> = prompt.evaluator()?;
        let x = evaluator.root_expectation(&policy);
        let report = EvalReport {
            prompt: p,
            greedy: evaluate(&policy, EvalMode::Greedy, &evaluator, seed)?,
            sample: evaluate(&policy, EvalMode::Sample { n: a.samples }, &evaluator, seed)?,
            exact: x.success,
            entropy: x.mean_entropy(),
            mean_length: x.length,
        };
        writeln!(stdout, "{}", serde_json::to_string(&report)?)?;
    }
    Ok(0)
}

fn run_sweep(a: SweepArgs) -> anyhow::Result<u8> {
    let mut config = a.config.load()?;
    if let Some(s) = a.common.seed {
        config.seeds = vec![s];
    }
    let format = format_of(&a.common)?;
    let out = a.common.out.as_deref().map(|d| (d, format));
    if let Some(dir) = &a.common.out {
        std::fs::create_dir_all(dir)?;
    }
    let rows = sweep(&config, &a.axis, &a.values, out)?;
    let summaries: Vec<SweepSummary> = rows.iter().map(|r| r.summary()).collect();
    let mut stdout = std::io::stdout().lock();
    write_summary(&summaries, &mut stdout)?;
    if let Some(dir) = &a.common.out {
        let mut f = std::fs::File::create(dir.join("summary.csv"))?;
        write_summary(&summaries, &mut f)?;
    }
    Ok(0)
}

fn write_summary(rows: &[SweepSummary], out: &mut impl Write) -> anyhow::Result<()> {
    writeln!(out, "variant,seeds,eval_mean,eval_std,entropy_mean,rollouts_mean")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.label, r.seeds, r.eval_mean, r.eval_std, r.entropy_mean, r.rollouts_mean
        )?;
    }
    Ok(())
}

fn fixture(action: FixtureAction) -> anyhow::Result<u8> {
    match action {
        FixtureAction::Dump { name, common } => {
            let env = pivotlab::env::load_fixture(&name)?;
            let text = env.to_document().to_json()?;
            match common.out {
                Some(path) => write_file(&path, &text)?,
                None => writeln!(std::io::stdout().lock(), "{text}")?,
            }
            Ok(0)
        }
        FixtureAction::Verify { name, tolerance } => {
            if !FIXTURE_NAMES.contains(&name.as_str()) {
                return Err(Error::NotFound(format!("fixture '{name}'")).into());
            }
            let checks = verify_fixture(&name)?;
            let mut ok = true;
            let mut stdout = std::io::stdout().lock();
            for c in &checks {
                let pass = c.passed(tolerance);
                ok &= pass;
                writeln!(
                    stdout,
                    "{} {:<10} expected {:<6} got {:.15}",
                    if pass { "PASS" } else { "FAIL" },
                    c.quantity,
                    c.expected,
                    c.actual
                )?;
            }
            Ok(if ok { 0 } else { 1 })
        }
    }
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> anyhow::Result<u8> {
    let mut configs = vec![("k3", OptimConfig::default())];
    if a.thorough {
        configs.push(("exact-kl", OptimConfig { kl: KlMode::Exact, beta: 0.05, ..OptimConfig::default() }));
    }
    let mut worst = 0.0f64;
    let mut failed = 0;
    for b in 0..a.batches {
        let batch = random_frozen_batch(a.seed.wrapping_add(b), BatchShape::default())?;
        for (name, config) in &configs {
            let r = check_batch(&batch, config, a.step, a.tolerance)?;
            worst = worst.max(r.main.max_rel_error).max(r.aux.max_rel_error);
            if !r.passed() {
                failed += 1;
                eprintln!(
                    "batch {b} ({name}): main {:.3e}, aux {:.3e}, prefix-only zero {}",
                    r.main.max_rel_error, r.aux.max_rel_error, r.prefix_only_zero
                );
            }
        }
    }
    writeln!(std::io::stdout().lock(), "{} batches, max relative error {worst:.3e}, {failed} failed", a.batches)?;
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} gradient checks above {}", a.tolerance)).into());
    }
    Ok(0)
}
