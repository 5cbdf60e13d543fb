mod common;

use eqlen_core::optim::{
    family_advantages, grpo_advantages, loss_eqlen_pair, loss_eqlen_total, loss_masked_pair, pair_segments, AdvantageFamily,
    AdvantageSpec, PairLossOptions,
};
use eqlen_core::reward::score_trajectory;
use eqlen_core::rollout::{effective_sample_count, rollout_dualtrack, rollout_independent, trailing_tokens};
use eqlen_core::types::{GroupRollout, Question, SegmentEnd, TrajectoryEnd};
use eqlen_core::reward::VerifierSpec;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn pair_segments_share_length_and_prefix(seed in any::<u64>()) {
        let case = common::random_case(seed);
        for p in &case.rollout.pairs {
            prop_assert_eq!(p.seg_plus.len(), p.length);
            prop_assert_eq!(p.seg_minus.len(), p.length);
            prop_assert_eq!(p.seg_plus.last(), Some(&case.policy.vocab().eos_id()));
            prop_assert!(p.length >= 1 && p.length <= case.config.max_len);
            prop_assert_eq!(&p.context_tokens[..p.prompt_len()], &case.question.prompt[..]);
        }
    }

    #[test]
    fn harvest_count_respects_cap(seed in any::<u64>()) {
        let case = common::random_case(seed);
        prop_assert_eq!(case.rollout.subgroups.len(), case.config.subgroups());
        for k in 0..case.config.subgroups() {
            prop_assert!(case.rollout.pairs_in_subgroup(k).count() <= case.config.max_pairs_per_subgroup);
        }
        prop_assert!(case.rollout.token_budget_used <= case.config.budget());
        prop_assert!(case.rollout.tree.is_well_formed());
    }

    #[test]
    fn rollouts_are_seed_deterministic(seed in any::<u64>()) {
        let a = common::random_case(seed);
        let b = common::random_case(seed);
        prop_assert_eq!(a.rollout, b.rollout);
    }

    #[test]
    fn effective_count_matches_unskipped_pairs(seed in any::<u64>()) {
        let case = common::random_case(seed);
        let unskipped = case.rollout.pairs.iter().filter(|p| !p.skipped).count();
        prop_assert_eq!(effective_sample_count(&case.rollout), 2 * unskipped);
        let harvested: usize = case.rollout.pairs.iter().map(|p| 2 * p.length).sum();
        prop_assert!(trailing_tokens(&case.rollout) <= case.rollout.token_budget_used);
        prop_assert!(harvested + trailing_tokens(&case.rollout) >= case.rollout.token_budget_used
            || case.rollout.pairs.iter().any(|p| p.inherited_prefix_len > 0));
    }

    #[test]
    fn reward_minus_is_max_over_extensions(seed in any::<u64>()) {
        let case = common::random_case(seed);
        let tree = &case.rollout.tree;
        for p in case.rollout.pairs.iter().filter(|p| p.reward_minus.is_some()) {
            let eos = case.policy.vocab().eos_id();
            let mut best = f64::NEG_INFINITY;
            for leaf in tree.nodes.iter().filter(|n| n.end_state.is_scored_leaf()) {
                let mut cur = Some(leaf.id);
                let mut extends = false;
                while let Some(id) = cur {
                    extends |= id == p.minus_node;
                    cur = tree.node(id).parent;
                }
                if extends {
                    let end = if leaf.end_state == SegmentEnd::Eos { TrajectoryEnd::Eos } else { TrajectoryEnd::Truncated };
                    best = best.max(score_trajectory(&case.question.verifier, eos, &tree.trajectory(leaf.id), end));
                }
            }
            prop_assert_eq!(p.reward_minus, Some(best));
        }
    }

    #[test]
    fn masked_prefix_never_receives_gradient(seed in any::<u64>()) {
        let case = common::random_case(seed);
        let spec = AdvantageSpec::new(AdvantageFamily::GrpoNorm);
        let out = loss_eqlen_total(&case.rollout, &spec, &case.policy, &case.policy, PairLossOptions::default()).unwrap();
        prop_assert!(out.prefix_grad.is_zero());
    }

    #[test]
    fn mask_off_tokens_are_inert(seed in any::<u64>(), flip in any::<u64>()) {
        let case = common::random_case(seed);
        let spec = AdvantageSpec::new(AdvantageFamily::GrpoNorm);
        let opts = PairLossOptions::default();
        let qid = case.rollout.question_id;
        for p in case.rollout.pairs.iter().filter(|p| !p.skipped && p.length > 1) {
            let Some(mut segs) = pair_segments(p, qid, &spec, &case.policy, opts).unwrap() else { continue };
            let t = (flip as usize) % p.length;
            for s in segs.iter_mut() {
                s.token_mask[t] = false;
            }
            let base = loss_masked_pair(&segs, &spec, &case.policy, 1.0);
            let mut other = segs.clone();
            for s in other.iter_mut() {
                s.old_log_probs[t] += 0.3;
                if t + 1 == p.length {
                    s.tokens[t] = (s.tokens[t] + 1) % case.policy.vocab().eos_id();
                }
            }
            let changed = loss_masked_pair(&other, &spec, &case.policy, 1.0);
            prop_assert_eq!(base.loss.to_bits(), changed.loss.to_bits());
            prop_assert!(base.grad.bitwise_eq(&changed.grad));
            prop_assert!(base.grad.is_finite());
        }
    }

    #[test]
    fn advantages_are_centered(rewards in prop::collection::vec(-10.0f64..10.0, 2..20)) {
        for family in [AdvantageFamily::DrGrpo, AdvantageFamily::Rloo] {
            prop_assert_eq!(family_advantages(family, &rewards).iter().sum::<f64>(), 0.0);
        }
        let g = grpo_advantages(&rewards);
        if g.active {
            prop_assert_eq!(g.advantages.iter().sum::<f64>(), 0.0);
        }
    }

    #[test]
    fn grpo_and_rloo_pairs_differ_by_a_scalar(a in -5.0f64..5.0, b in -5.0f64..5.0) {
        prop_assume!(a != b);
        let g = family_advantages(AdvantageFamily::GrpoNorm, &[a, b]);
        let r = family_advantages(AdvantageFamily::Rloo, &[a, b]);
        let k = (a - b).abs();
        prop_assert!((r[0] - k * g[0]).abs() <= 1e-12 * k.max(1.0));
        prop_assert!((r[1] - k * g[1]).abs() <= 1e-12 * k.max(1.0));
    }
}

#[test]
fn mean_length_matches_geometric_expectation() {
    let vocab_size = 6;
    let p_eos = 0.125;
    let mut policy = eqlen_core::types::PolicyTable::new(eqlen_core::types::Vocab::new(vocab_size, vocab_size - 1).unwrap(), 1);
    let other = ((1.0 - p_eos) / (vocab_size - 1) as f64).ln();
    let mut row = vec![other; vocab_size as usize];
    row[(vocab_size - 1) as usize] = p_eos.ln();
    policy.set_default_logits(row).unwrap();
    let q = Question { id: 0, prompt: vec![], verifier: VerifierSpec::Parity { target: 0 } };
    let mut total = 0usize;
    let mut count = 0usize;
    for seed in 0..1250u64 {
        let g: GroupRollout = rollout_independent(&policy, &q, 8, 10_000, seed);
        for t in &g.trajectories {
            total += t.tokens.len();
            count += 1;
        }
    }
    let mean = total as f64 / count as f64;
    assert!((mean - 1.0 / p_eos).abs() / (1.0 / p_eos) < 0.05, "mean length {mean}");
}

#[test]
fn scripted_lengths_give_expected_pairs() {
    let cfg = eqlen_core::rollout::RolloutConfig::new(2, 16);
    let vocab = eqlen_core::types::Vocab::new(4, 3).unwrap();
    let sampler = eqlen_core::rollout::ScriptedSampler::new(vocab, vec![vec![3, 5, 9], vec![7]]);
    let q = Question { id: 0, prompt: vec![], verifier: VerifierSpec::Parity { target: 0 } };
    let r = rollout_dualtrack(&sampler, &q, &cfg, 0).unwrap();
    assert!(!r.pairs.is_empty());
    assert_eq!(r.pairs[0].length, 3);
    for p in &r.pairs {
        assert_eq!(p.seg_plus.len(), p.seg_minus.len());
    }
}

#[test]
fn single_pair_losses_are_zero_when_rewards_tie() {
    for seed in 0..200u64 {
        let case = common::random_case(seed);
        let spec = AdvantageSpec::new(AdvantageFamily::Rloo);
        for p in case.rollout.pairs.iter().filter(|p| p.skipped) {
            let out = loss_eqlen_pair(p, case.rollout.question_id, &spec, &case.policy, &case.policy, PairLossOptions::default()).unwrap();
            assert!(out.grad.is_zero());
            assert!(!out.active);
        }
    }
}
