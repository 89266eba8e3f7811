use std::sync::Arc;

use proptest::prelude::*;

use super::gradcheck::{check_batch, random_frozen_batch, relative_error, BatchShape};
use super::*;
use crate::env::{build_planted_tree, exact_success_probability, Reward};
use crate::policy::{init_policy, InitMode, Origin, Token};
use crate::sampler::{sample_group, PivotPlan, Streams};

fn rewards(rs: &[u8]) -> Vec<f64> {
    rs.iter().map(|&r| r as f64).collect()
}

#[test]
fn advantage_examples() {
    let a = standardize(&rewards(&[1, 0, 0, 1]), AdvantageStream::Global);
    assert_eq!(a.values, vec![1.0, -1.0, -1.0, 1.0]);
    assert!(!a.degenerate);

    let a = standardize(&[1.0; 5], AdvantageStream::Global);
    assert!(a.degenerate && a.values.iter().all(|&v| v == 0.0));

    let a = standardize(&rewards(&[1, 0, 0, 0, 0, 0, 0, 0]), AdvantageStream::Local);
    // Independent route: σ = sqrt(7/64), A = (1 - 1/8)/σ and -(1/8)/σ.
    let sd = (7.0f64 / 64.0).sqrt();
    assert!((a.values[0] - 0.875 / sd).abs() < 1e-12);
    assert!((a.values[1] + 0.125 / sd).abs() < 1e-12);
    assert!((a.values[0] - 2.6458).abs() < 1e-4);
    assert!((a.values[1] + 0.3780).abs() < 1e-4);

    let a = standardize(&rewards(&[1, 0]), AdvantageStream::Local);
    assert_eq!(a.values, vec![1.0, -1.0]);
    assert!(standardize(&[1.0], AdvantageStream::Local).degenerate);
    // Equal non-integer rewards whose mean rounds.
    assert!(standardize(&[0.1; 10], AdvantageStream::Global).degenerate);
}

#[test]
fn group_of_one_is_rejected() {
    let env = Arc::new(build_planted_tree(2, 2, 0.5, 0).unwrap());
    let p = init_policy(env, InitMode::Uniform).unwrap();
    let mut g = sample_group(&p, 0, 2, &Streams::new(0, 0)).unwrap();
    g.trajectories.pop();
    assert!(global_advantages(&g).is_err());
}

#[test]
fn clip_examples() {
    assert_eq!(clipped_term(1.0, 1.0, 0.2), 1.0);
    assert_eq!(clipped_term(1.5, 1.0, 0.2), 1.2);
    assert_eq!(clipped_term(0.5, -1.0, 0.2), -0.8);
    // Unclipped side of each sign.
    assert_eq!(clipped_term(0.5, 1.0, 0.2), 0.5);
    assert_eq!(clipped_term(1.5, -1.0, 0.2), -1.5);
}

#[test]
fn config_validation() {
    assert!(OptimConfig::default().validate().is_ok());
    let bad = OptimConfig { epsilon: 0.0, ..Default::default() };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let bad = OptimConfig { eta: -1.0, ..Default::default() };
    assert!(bad.validate().is_err());
}

fn on_policy_batch(seed: u64) -> (Policy, ReferencePolicy, Vec<Group>, Vec<AdvantageSet>) {
    let env = Arc::new(build_planted_tree(3, 2, 0.4, seed).unwrap());
    let p = init_policy(env, InitMode::SeededRandom { scale: 1.0, seed }).unwrap();
    let r = p.snapshot();
    let g = sample_group(&p, 0, 4, &Streams::new(seed, 0)).unwrap();
    let a = global_advantages(&g).unwrap();
    (p, r, vec![g], vec![a])
}

#[test]
fn on_policy_gradient_is_plain_policy_gradient() {
    let cfg = OptimConfig { beta: 0.0, advantage_filter: AdvantageFilter::KeepAll, ..Default::default() };
    for seed in 0..10 {
        let (p, r, groups, advs) = on_policy_batch(seed);
        let acc = main_stream_gradient(&p, &r, &groups, &advs, &cfg).unwrap();
        let mut expected = GradientMap::new();
        let mut tokens = 0;
        for (t, a) in groups[0].trajectories.iter().zip(&advs[0].values) {
            for tok in &t.actions {
                let probs = p.action_distribution(tok.node).unwrap();
                let e = expected.entry(tok.node).or_insert_with(|| vec![0.0; probs.len()]);
                for j in 0..probs.len() {
                    e[j] += a * ((j == tok.action as usize) as u8 as f64 - probs[j]);
                }
                tokens += 1;
            }
        }
        assert_eq!(acc.token_count, tokens);
        let got = acc.gradient();
        for (n, e) in &expected {
            for (x, y) in got[n].iter().zip(e) {
                assert!((x - y / tokens as f64).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn degenerate_batch_has_no_gradient() {
    let env = Arc::new(build_planted_tree(2, 2, 1.0, 0).unwrap());
    let p = init_policy(env, InitMode::Uniform).unwrap();
    let r = p.snapshot();
    let g = sample_group(&p, 0, 4, &Streams::new(0, 0)).unwrap();
    let a = global_advantages(&g).unwrap();
    assert!(a.degenerate);
    let acc = main_stream_gradient(&p, &r, &[g], &[a], &OptimConfig::default()).unwrap();
    assert!(acc.gradient().is_empty());
    assert_eq!(acc.token_count, 0);
}

#[test]
fn strict_mode_rejects_stale_logprobs() {
    let (mut p, r, groups, advs) = on_policy_batch(3);
    let cfg = OptimConfig { strict: true, advantage_filter: AdvantageFilter::KeepAll, ..Default::default() };
    assert!(main_stream_gradient(&p, &r, &groups, &advs, &cfg).is_ok());
    let node = groups[0].trajectories[0].actions[0].node;
    p.add_scaled(node, &[0.3, -0.3], 1.0).unwrap();
    assert!(matches!(
        main_stream_gradient(&p, &r, &groups, &advs, &cfg),
        Err(Error::Contract(_))
    ));
}

#[test]
fn frozen_batches_pass_finite_differences() {
    for seed in 0..20 {
        let batch = random_frozen_batch(seed, BatchShape::default()).unwrap();
        for cfg in [
            OptimConfig::default(),
            OptimConfig { beta: 0.05, advantage_filter: AdvantageFilter::KeepAll, ..Default::default() },
            OptimConfig { beta: 0.05, kl: KlMode::Exact, loss_norm: LossNorm::PerTrajectoryMean, ..Default::default() },
        ] {
            let check = check_batch(&batch, &cfg, 1e-6, 1e-5).unwrap();
            assert!(check.passed(), "seed {seed}: {:?} {:?}", check.main.offending.first(), check.aux.offending.first());
        }
    }
}

#[test]
fn off_policy_points_pass_finite_differences() {
    // Move the logits away from the sampling point so ratios differ from 1
    // and some tokens sit on the clipped side.
    for seed in 0..10 {
        let mut batch = random_frozen_batch(100 + seed, BatchShape::default()).unwrap();
        let nodes: Vec<_> = batch.policy.env().internal_nodes().collect();
        for (i, n) in nodes.iter().enumerate() {
            let arity = batch.policy.env().arity(*n);
            let delta: Vec<f64> = (0..arity).map(|j| (((i * 7 + j * 3) % 5) as f64 - 2.0) * 0.2).collect();
            batch.policy.add_scaled(*n, &delta, 1.0).unwrap();
        }
        let cfg = OptimConfig { beta: 0.01, advantage_filter: AdvantageFilter::KeepAll, ..Default::default() };
        let check = check_batch(&batch, &cfg, 1e-6, 1e-5).unwrap();
        assert!(check.passed(), "seed {seed}: {:?}", check.main.offending.first());
    }
}

#[test]
fn corrupted_gradient_is_flagged() {
    let batch = random_frozen_batch(5, BatchShape::default()).unwrap();
    let cfg = OptimConfig::default();
    let mut g = main_stream_gradient(&batch.policy, &batch.reference, &batch.groups, &batch.main_advantages, &cfg)
        .unwrap()
        .gradient();
    let node = batch.policy.env().root();
    g.entry(node).or_insert_with(|| vec![0.0; batch.policy.env().arity(node)])[0] += 1.0;
    let nodes: Vec<_> = batch.policy.env().internal_nodes().collect();
    let report = finite_difference_check(
        |p| main_stream_objective(p, &batch.reference, &batch.groups, &batch.main_advantages, &cfg),
        &batch.policy,
        &g,
        &nodes,
        1e-6,
        1e-5,
    )
    .unwrap();
    assert!(!report.passed());
    assert_eq!(report.offending[0].node, node);
    assert_eq!(report.offending[0].action, 0);
}

#[test]
fn quadratic_objective_is_exact() {
    let env = Arc::new(build_planted_tree(3, 3, 0.5, 1).unwrap());
    let p = init_policy(env.clone(), InitMode::SeededRandom { scale: 2.0, seed: 4 }).unwrap();
    let nodes: Vec<_> = env.internal_nodes().collect();
    let objective = |q: &Policy| -> crate::Result<f64> {
        let mut s = 0.0;
        for n in &nodes {
            for (j, l) in q.logits(*n).unwrap().iter().enumerate() {
                s += (j as f64 + 1.0) * l * l;
            }
        }
        Ok(s)
    };
    let analytic: GradientMap = nodes
        .iter()
        .map(|n| {
            let l = p.logits(*n).unwrap();
            (*n, l.iter().enumerate().map(|(j, x)| 2.0 * (j as f64 + 1.0) * x).collect())
        })
        .collect();
    let report = finite_difference_check(objective, &p, &analytic, &nodes, 1e-5, 1e-9).unwrap();
    assert!(report.max_rel_error < 1e-9, "{}", report.max_rel_error);
    assert!(finite_difference_check(objective, &p, &analytic, &nodes, 0.0, 1e-9).is_err());
    assert_eq!(relative_error(0.0, 0.0), 0.0);
}

#[test]
fn masking_zeroes_prefix_only_nodes() {
    for seed in 0..20 {
        let batch = random_frozen_batch(seed, BatchShape::default()).unwrap();
        let check = check_batch(&batch, &OptimConfig::default(), 1e-6, 1e-5).unwrap();
        assert!(check.prefix_only_zero);
    }
}

#[test]
fn empty_prefix_aux_equals_main_under_trajectory_mean() {
    let (p, r, groups, advs) = on_policy_batch(8);
    let g = &groups[0];
    let set = AuxiliarySet {
        prompt_id: 0,
        plan: PivotPlan { parent: 0, ordinal: 0, t_star: 1, candidates: 1, normalized_depth: 0.5, prefix_len: 0 },
        branches: g.trajectories.clone(),
        recovery_label: if g.successes() > 0 { Reward::CORRECT } else { Reward::INCORRECT },
    };
    let cfg = OptimConfig { loss_norm: LossNorm::PerTrajectoryMean, beta: 0.01, ..Default::default() };
    let local = vec![local_advantages(&set)];
    assert_eq!(local[0].values, advs[0].values);
    let main = main_stream_gradient(&p, &r, &groups, &advs, &cfg).unwrap();
    let aux = aux_stream_gradient(&p, &r, &[set], &local, &cfg).unwrap();
    assert_eq!(main.gradient(), aux.gradient());
}

#[test]
fn update_directions() {
    let env = Arc::new(build_planted_tree(3, 2, 0.5, 2).unwrap());
    let p = init_policy(env.clone(), InitMode::SeededRandom { scale: 1.0, seed: 2 }).unwrap();
    let r = p.snapshot();
    let g = sample_group(&p, 0, 4, &Streams::new(2, 0)).unwrap();
    let traj = g.trajectories[0].clone();
    let single = Group { prompt_id: 0, trajectories: vec![traj.clone()] };
    let adv = AdvantageSet { values: vec![1.0], stream: AdvantageStream::Global, degenerate: false };
    let cfg = OptimConfig { beta: 0.0, ..Default::default() };
    let gm = main_stream_gradient(&p, &r, &[single], &[adv], &cfg).unwrap();
    let empty = GradientAccumulator::new(cfg.loss_norm);

    let mut q = p.clone();
    apply_update(&mut q, &gm, &empty, &cfg).unwrap();
    for tok in &traj.actions {
        let before = p.log_prob_action(tok.node, tok.action as usize).unwrap();
        let after = q.log_prob_action(tok.node, tok.action as usize).unwrap();
        assert!(after > before);
    }

    let mut frozen = p.clone();
    apply_update(&mut frozen, &gm, &empty, &OptimConfig { eta: 0.0, ..cfg }).unwrap();
    assert!(frozen.same_parameters(&p));

    // λ = 0 ignores the auxiliary stream bit for bit.
    let mut a = p.clone();
    let mut b = p.clone();
    apply_update(&mut a, &gm, &empty, &OptimConfig { lambda: 0.0, ..cfg }).unwrap();
    apply_update(&mut b, &gm, &gm, &OptimConfig { lambda: 0.0, ..cfg }).unwrap();
    assert!(a.same_parameters(&b));
}

#[test]
fn non_finite_gradient_is_a_numeric_error() {
    let (p, r, groups, advs) = on_policy_batch(1);
    let cfg = OptimConfig { advantage_filter: AdvantageFilter::KeepAll, ..Default::default() };
    let mut gm = main_stream_gradient(&p, &r, &groups, &advs, &cfg).unwrap();
    let node = groups[0].trajectories[0].actions[0].node;
    let mut bad = GradientAccumulator::new(cfg.loss_norm);
    bad.add(node, 2, f64::NAN, &[1.0, 1.0]);
    bad.token_count = 1;
    gm.merge(&bad).unwrap();
    let mut q = p.clone();
    assert!(matches!(
        apply_update(&mut q, &gm, &GradientAccumulator::new(cfg.loss_norm), &cfg),
        Err(Error::Numeric(_))
    ));
    assert!(q.same_parameters(&p));
}

#[test]
fn single_success_update_does_not_hurt_success() {
    let cfg = OptimConfig { beta: 0.0, eta: 1e-3, ..Default::default() };
    let mut checked = 0;
    for seed in 0..60 {
        let env = Arc::new(build_planted_tree(4, 2, 0.2, seed).unwrap());
        let p = init_policy(env.clone(), InitMode::SeededRandom { scale: 1.0, seed }).unwrap();
        let r = p.snapshot();
        let g = sample_group(&p, 0, 8, &Streams::new(seed, 0)).unwrap();
        if g.successes() != 1 {
            continue;
        }
        checked += 1;
        let a = global_advantages(&g).unwrap();
        let gm = main_stream_gradient(&p, &r, &[g], &[a], &cfg).unwrap();
        let mut q = p.clone();
        apply_update(&mut q, &gm, &GradientAccumulator::new(cfg.loss_norm), &cfg).unwrap();
        let before = exact_success_probability(&p, env.root()).unwrap();
        let after = exact_success_probability(&q, env.root()).unwrap();
        assert!(after >= before, "seed {seed}: {before} -> {after}");
    }
    assert!(checked >= 5);
}

#[test]
fn main_gradient_ignores_aux_composition() {
    let batch = random_frozen_batch(9, BatchShape::default()).unwrap();
    let cfg = OptimConfig::default();
    let gm = main_stream_gradient(&batch.policy, &batch.reference, &batch.groups, &batch.main_advantages, &cfg)
        .unwrap()
        .gradient();
    let one = aux_stream_gradient(&batch.policy, &batch.reference, &batch.aux_sets, &batch.aux_advantages, &cfg)
        .unwrap();
    let doubled_sets: Vec<_> = batch.aux_sets.iter().chain(&batch.aux_sets).cloned().collect();
    let doubled_adv: Vec<_> = batch.aux_advantages.iter().chain(&batch.aux_advantages).cloned().collect();
    let two = aux_stream_gradient(&batch.policy, &batch.reference, &doubled_sets, &doubled_adv, &cfg).unwrap();
    assert_eq!(two.token_count, 2 * one.token_count);
    for (n, g) in one.gradient() {
        for (x, y) in g.iter().zip(&two.gradient()[&n]) {
            assert!((x - y).abs() < 1e-15);
        }
    }
    let gm_again = main_stream_gradient(&batch.policy, &batch.reference, &batch.groups, &batch.main_advantages, &cfg)
        .unwrap()
        .gradient();
    assert_eq!(gm, gm_again);
}

#[test]
fn merged_prompts_share_one_denominator() {
    let batch = random_frozen_batch(2, BatchShape::default()).unwrap();
    let cfg = OptimConfig { advantage_filter: AdvantageFilter::KeepAll, ..Default::default() };
    let whole = main_stream_gradient(&batch.policy, &batch.reference, &batch.groups, &batch.main_advantages, &cfg)
        .unwrap();
    let mut merged = GradientAccumulator::new(cfg.loss_norm);
    for (g, a) in batch.groups.iter().zip(&batch.main_advantages) {
        let part = main_stream_gradient(
            &batch.policy,
            &batch.reference,
            std::slice::from_ref(g),
            std::slice::from_ref(a),
            &cfg,
        )
        .unwrap();
        merged.merge(&part).unwrap();
    }
    assert_eq!(merged.token_count, whole.token_count);
    for (n, g) in whole.gradient() {
        for (x, y) in g.iter().zip(&merged.gradient()[&n]) {
            assert!((x - y).abs() < 1e-15);
        }
    }
}

#[test]
fn masked_and_unmasked_differ_only_on_prefix_nodes() {
    let batch = random_frozen_batch(4, BatchShape { max_depth: 4, max_arity: 2, max_group: 4, max_branches: 4 }).unwrap();
    let cfg = OptimConfig { beta: 0.0, advantage_filter: AdvantageFilter::KeepAll, loss_norm: LossNorm::PerTrajectoryMean, ..Default::default() };
    let masked = aux_items(&batch.aux_sets, &batch.aux_advantages, &cfg, true).unwrap();
    let unmasked = aux_items(&batch.aux_sets, &batch.aux_advantages, &cfg, false).unwrap();
    let mut a = GradientAccumulator::new(cfg.loss_norm);
    let mut b = GradientAccumulator::new(cfg.loss_norm);
    accumulate(&batch.policy, &batch.reference, &masked, &cfg, &mut a).unwrap();
    accumulate(&batch.policy, &batch.reference, &unmasked, &cfg, &mut b).unwrap();
    let prefix_nodes: std::collections::BTreeSet<_> = batch
        .aux_sets
        .iter()
        .flat_map(|s| s.branches.iter().flat_map(|t| t.actions[..t.prefix_len].iter().map(|k| k.node)))
        .collect();
    for (n, gb) in b.raw() {
        if !prefix_nodes.contains(n) {
            assert_eq!(a.raw().get(n), Some(gb));
        }
    }
    assert!(prefix_nodes.iter().any(|n| a.raw().get(n) != b.raw().get(n)));
}

#[test]
fn malformed_tokens_are_domain_errors() {
    let (p, r, _, _) = on_policy_batch(0);
    let bad = Trajectory {
        prompt_id: 0,
        actions: vec![Token { node: p.env().root(), action: 7 }],
        behavior_logprobs: vec![0.0],
        reward: Some(Reward::CORRECT),
        origin: Origin::Main,
        prefix_len: 0,
        leaf: None,
    };
    let items = [Scored { trajectory: &bad, advantage: 1.0, from: 0 }];
    let mut acc = GradientAccumulator::new(LossNorm::BatchTokenMean);
    assert!(matches!(
        accumulate(&p, &r, &items, &OptimConfig::default(), &mut acc),
        Err(Error::Domain(_))
    ));
}

proptest! {
    #[test]
    fn nondegenerate_sets_are_standardized(rs in proptest::collection::vec(0u8..2, 2..17)) {
        let a = standardize(&rewards(&rs), AdvantageStream::Global);
        if rs.iter().all(|&r| r == rs[0]) {
            prop_assert!(a.degenerate);
            prop_assert!(a.values.iter().all(|&v| v == 0.0));
        } else {
            let n = a.values.len() as f64;
            let mean = a.values.iter().sum::<f64>() / n;
            let sd = (a.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((sd - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn clip_never_exceeds_unclipped(rho in 0.01f64..5.0, a in -3.0f64..3.0, eps in 0.01f64..0.5) {
        prop_assert!(clipped_term(rho, a, eps) <= rho * a + 1e-15);
    }
}
