use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::config::RunConfig;
use super::metrics::{export_metrics, MetricsFormat};
use super::stats::{mean, std_dev};
use super::train::{RunOutput, RunSetup, Trainer};

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub label: String,
    pub config: RunConfig,
    /// One run per seed, in seed order.
    pub runs: Vec<RunOutput>,
}

impl SweepRow {
    pub fn final_evals(&self) -> Vec<f64> {
        self.runs.iter().map(RunOutput::final_eval).collect()
    }

    pub fn final_entropies(&self) -> Vec<f64> {
        self.runs.iter().map(RunOutput::final_entropy).collect()
    }

    pub fn summary(&self) -> SweepSummary {
        let evals = self.final_evals();
        let ent = self.final_entropies();
        let rollouts: Vec<f64> = self.runs.iter().map(|r| r.rollouts as f64).collect();
        SweepSummary {
            label: self.label.clone(),
            seeds: self.runs.len(),
            eval_mean: mean(&evals),
            eval_std: std_dev(&evals),
            entropy_mean: mean(&ent),
            rollouts_mean: mean(&rollouts),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub label: String,
    pub seeds: usize,
    pub eval_mean: f64,
    pub eval_std: f64,
    pub entropy_mean: f64,
    pub rollouts_mean: f64,
}

fn same_setup(a: &RunConfig, b: &RunConfig) -> bool {
    a.env == b.env && a.init == b.init && a.prompts_per_step == b.prompts_per_step
}

/// Runs every labelled config over `seeds`.
///
/// Seeds are processed one after another and the variants of a seed in
/// parallel; variants with the same environment and initialization share
/// one setup, including its exact evaluator. With `out`, each run's metrics
/// land in `out/<label>/seed-<seed>.<ext>`.
pub fn run_variants(
    variants: &[(String, RunConfig)],
    seeds: &[u64],
    out: Option<(&Path, MetricsFormat)>,
) -> Result<Vec<SweepRow>> {
    for (_, c) in variants {
        c.validate()?;
    }
    let mut rows: Vec<SweepRow> = variants
        .iter()
        .map(|(label, config)| SweepRow { label: label.clone(), config: config.clone(), runs: Vec::new() })
        .collect();
    for &seed in seeds {
        let mut setups: Vec<(usize, RunSetup)> = Vec::new();
        for (i, (_, c)) in variants.iter().enumerate() {
            if !setups.iter().any(|(j, _)| same_setup(&variants[*j].1, c)) {
                setups.push((i, RunSetup::build(c, seed)?));
            }
        }
        let outputs: Vec<Result<RunOutput>> = variants
            .par_iter()
            .map(|(_, c)| {
                let setup = setups
                    .iter()
                    .find(|(j, _)| same_setup(&variants[*j].1, c))
                    .map(|(_, s)| s.clone())
                    .expect("setup built above");
                let mut c = c.clone();
                c.metrics = None;
                c.rollout_log = None;
                Trainer::with_setup(c, seed, setup)?.run()
            })
            .collect();
        for (row, output) in rows.iter_mut().zip(outputs) {
            let output = output?;
            if let Some((dir, format)) = out {
                let dir = dir.join(sanitize(&row.label));
                std::fs::create_dir_all(&dir)?;
                let path = dir.join(format!("seed-{seed}.{}", format.extension()));
                export_metrics(&output.log, path, format)?;
            }
            row.runs.push(output);
        }
    }
    Ok(rows)
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.=+".contains(c) { c } else { '_' })
        .collect()
}

/// Runs `base` once per value of the dotted `axis` over `base.seeds`.
pub fn sweep(
    base: &RunConfig,
    axis: &str,
    values: &[String],
    out: Option<(&Path, MetricsFormat)>,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config(format!("sweep over '{axis}' has no values")));
    }
    let variants = values
        .iter()
        .map(|v| {
            let mut c = base.clone();
            c.set(axis, v)?;
            Ok((format!("{axis}={v}"), c))
        })
        .collect::<Result<Vec<_>>>()?;
    run_variants(&variants, &base.seeds, out)
}
