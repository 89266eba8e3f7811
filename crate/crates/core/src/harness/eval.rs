use crate::env::ExactEvaluator;
use crate::error::Result;
use crate::policy::{greedy_rollout, sample_trajectory, Policy, Start};
use crate::rng::substream;

use super::config::EvalMode;

/// Success rate of `policy` under `mode`.
///
/// Greedy is one argmax rollout (ties to the lowest index), sample mode
/// draws `n` rollouts from a stream seeded by `seed`, and exact mode is the
/// enumerated success probability.
pub fn evaluate(policy: &Policy, mode: EvalMode, evaluator: &ExactEvaluator, seed: u64) -> Result<f64> {
    Ok(match mode {
        EvalMode::Greedy => greedy_rollout(policy)?.reward_value(),
        EvalMode::Sample { n } => {
            let mut rng = substream(seed, &[]);
            let mut hits = 0usize;
            for _ in 0..n {
                if sample_trajectory(policy, 0, &mut rng, Start::Root)?.succeeded() {
                    hits += 1;
                }
            }
            hits as f64 / n as f64
        }
        EvalMode::Exact => evaluator.root_success(policy),
    })
}
