#![allow(dead_code)]

use eqlen_core::reward::{score_rollout, RewardOptions, VerifierSpec};
use eqlen_core::rollout::{rollout_dualtrack, PairMode, RelaunchMode, RolloutConfig};
use eqlen_core::types::{Context, GroupRollout, PolicyTable, Question, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A policy with random default logits and random rows on the question's
/// first contexts. The EOS logit is biased so trajectories end well
/// before long horizons.
pub fn random_policy(rng: &mut ChaCha8Rng, vocab_size: u32, order: usize, question_id: u32) -> PolicyTable {
    let vocab = Vocab::new(vocab_size, vocab_size - 1).unwrap();
    let mut policy = PolicyTable::new(vocab, order);
    let row = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut r: Vec<f64> = (0..vocab_size).map(|_| rng.gen_range(-1.5..1.5)).collect();
        r[(vocab_size - 1) as usize] += rng.gen_range(0.0..2.0);
        r
    };
    let default = row(rng);
    policy.set_default_logits(default).unwrap();
    let mut ctx = Context::initial(question_id, order);
    for _ in 0..4 {
        policy.set_logits(ctx.clone(), row(rng)).unwrap();
        ctx = ctx.advanced(rng.gen_range(0..vocab_size - 1));
    }
    policy
}

pub fn random_question(rng: &mut ChaCha8Rng, id: u32, vocab_size: u32) -> Question {
    let verifier = if rng.gen_bool(0.5) {
        VerifierSpec::AnswerMatch { target: rng.gen_range(0..vocab_size - 1) }
    } else {
        VerifierSpec::Parity { target: rng.gen_range(0..2) }
    };
    let prompt_len = rng.gen_range(0..3);
    Question {
        id,
        prompt: (0..prompt_len).map(|_| rng.gen_range(0..vocab_size - 1)).collect(),
        verifier,
    }
}

pub fn random_rollout_config(rng: &mut ChaCha8Rng) -> RolloutConfig {
    let mut cfg = RolloutConfig::new(2 * rng.gen_range(1..=4), rng.gen_range(1..=24));
    cfg.max_pairs_per_subgroup = rng.gen_range(1..=8);
    cfg.pair_mode = if rng.gen_bool(0.2) { PairMode::Single } else { PairMode::Multi };
    cfg.relaunch = if rng.gen_bool(0.2) { RelaunchMode::FreshBoth } else { RelaunchMode::KeepSurvivor };
    if rng.gen_bool(0.2) {
        cfg.token_budget = Some(rng.gen_range(1..=cfg.group_size * cfg.max_len));
    }
    cfg
}

/// One randomized, scored dual-track rollout.
pub struct Case {
    pub policy: PolicyTable,
    pub question: Question,
    pub config: RolloutConfig,
    pub rollout: GroupRollout,
}

pub fn random_case(seed: u64) -> Case {
    let mut r = rng(seed);
    let vocab_size = r.gen_range(3..=10);
    let order = r.gen_range(1..=3);
    let question = random_question(&mut r, (seed % 1000) as u32, vocab_size);
    let policy = random_policy(&mut r, vocab_size, order, question.id);
    let config = random_rollout_config(&mut r);
    let mut rollout = rollout_dualtrack(&policy, &question, &config, seed).unwrap();
    score_rollout(&mut rollout, &question.verifier, policy.vocab().eos_id(), RewardOptions::default()).unwrap();
    Case {
        policy,
        question,
        config,
        rollout,
    }
}

/// `policy` with every stored logit and the default row nudged by up to
/// `noise`, for off-policy ratios.
pub fn perturbed(policy: &PolicyTable, rng: &mut ChaCha8Rng, noise: f64) -> PolicyTable {
    let mut p = policy.clone();
    let d: Vec<f64> = p.default_logits().iter().map(|v| v + rng.gen_range(-noise..noise)).collect();
    p.set_default_logits(d).unwrap();
    let ctxs: Vec<Context> = p.stored_contexts().cloned().collect();
    for c in ctxs {
        let row: Vec<f64> = p.logits_for(&c).iter().map(|v| v + rng.gen_range(-noise..noise)).collect();
        p.set_logits(c, row).unwrap();
    }
    p
}
