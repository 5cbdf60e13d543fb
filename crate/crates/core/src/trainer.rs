//! The training loop: rollout, reward, loss, update, metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EqlenError, Result};
use crate::optim::{
    loss_eqlen_rloo, loss_eqlen_total, loss_grpo, sgd_step, AdvantageFamily, AdvantageSpec, LossOutput, PairLossOptions, SkipCounting,
};
use crate::policy::entropy;
use crate::reward::{score_rollout, Aggregation, Descent, RewardOptions, VerifierSpec};
use crate::rng::derive_seed;
use crate::rollout::{effective_sample_count, rollout_dualtrack, rollout_independent, trailing_tokens, PairMode, RolloutConfig};
use crate::types::{Context, GradientVector, GroupRollout, PolicyTable, Question, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Grpo,
    DrGrpo,
    Rloo,
    EqlenGrpo,
    EqlenRloo,
}

impl Algorithm {
    pub fn is_eqlen(self) -> bool {
        matches!(self, Algorithm::EqlenGrpo | Algorithm::EqlenRloo)
    }

    pub fn default_family(self) -> AdvantageFamily {
        match self {
            Algorithm::Grpo | Algorithm::EqlenGrpo => AdvantageFamily::GrpoNorm,
            Algorithm::DrGrpo => AdvantageFamily::DrGrpo,
            Algorithm::Rloo | Algorithm::EqlenRloo => AdvantageFamily::Rloo,
        }
    }

    fn allows(self, family: AdvantageFamily) -> bool {
        match self {
            // The pair-based GRPO loss also accepts the Dr. GRPO advantage.
            Algorithm::EqlenGrpo => family != AdvantageFamily::Rloo,
            other => other.default_family() == family,
        }
    }
}

/// Advantage settings; the family defaults to the algorithm's own.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvantageOptions {
    #[serde(default)]
    pub family: Option<AdvantageFamily>,
    #[serde(default = "default_epsilon")]
    pub epsilon_clip: Option<f64>,
    #[serde(default = "default_true")]
    pub length_norm: bool,
}

fn default_epsilon() -> Option<f64> {
    Some(0.2)
}

fn default_true() -> bool {
    true
}

impl Default for AdvantageOptions {
    fn default() -> Self {
        AdvantageOptions {
            family: None,
            epsilon_clip: default_epsilon(),
            length_norm: true,
        }
    }
}

/// Shape of the tabular policy being trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub vocab_size: u32,
    pub eos_id: u32,
    pub order: usize,
}

impl Default for PolicyShape {
    fn default() -> Self {
        PolicyShape {
            vocab_size: 16,
            eos_id: 15,
            order: 2,
        }
    }
}

impl PolicyShape {
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.vocab_size, self.eos_id)
    }

    pub fn uniform_policy(&self) -> Result<PolicyTable> {
        Ok(PolicyTable::new(self.vocab()?, self.order))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    #[serde(default)]
    pub policy: PolicyShape,
    pub rollout: RolloutConfig,
    #[serde(default)]
    pub advantage: AdvantageOptions,
    pub lr: f64,
    pub steps: usize,
    #[serde(default = "default_epochs")]
    pub epochs_per_rollout: usize,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub descent: Descent,
    #[serde(default)]
    pub prefix_in_gradient: bool,
    #[serde(default)]
    pub skip_counting: SkipCounting,
    #[serde(default)]
    pub seed: u64,
}

fn default_epochs() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algorithm: Algorithm::EqlenGrpo,
            policy: PolicyShape::default(),
            rollout: RolloutConfig::new(8, 16),
            advantage: AdvantageOptions::default(),
            lr: 100.0,
            steps: 200,
            epochs_per_rollout: 1,
            aggregation: Aggregation::Max,
            descent: Descent::Transitive,
            prefix_in_gradient: false,
            skip_counting: SkipCounting::Include,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.policy.vocab()?;
        if self.policy.order == 0 {
            return Err(EqlenError::config("policy.order", "must be at least 1"));
        }
        if self.algorithm.is_eqlen() {
            self.rollout.validate().map_err(|e| match e {
                EqlenError::Config { field, message } => EqlenError::config(format!("rollout.{field}"), message),
                other => other,
            })?;
        } else {
            if self.rollout.group_size < 2 {
                return Err(EqlenError::config("rollout.group_size", "must be at least 2"));
            }
            if self.rollout.max_len == 0 {
                return Err(EqlenError::config("rollout.max_len", "must be positive"));
            }
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(EqlenError::config("lr", format!("{} must be positive and finite", self.lr)));
        }
        if self.epochs_per_rollout == 0 {
            return Err(EqlenError::config("epochs_per_rollout", "must be at least 1"));
        }
        let spec = self.advantage_spec();
        spec.validate()?;
        if !self.algorithm.allows(spec.family) {
            return Err(EqlenError::config(
                "advantage.family",
                format!("{:?} is not available for {:?}", spec.family, self.algorithm),
            ));
        }
        Ok(())
    }

    pub fn advantage_spec(&self) -> AdvantageSpec {
        AdvantageSpec {
            family: self.advantage.family.unwrap_or(self.algorithm.default_family()),
            epsilon_clip: self.advantage.epsilon_clip,
            length_norm: self.advantage.length_norm,
        }
    }

    pub fn reward_options(&self) -> RewardOptions {
        RewardOptions {
            aggregation: self.aggregation,
            descent: self.descent,
        }
    }

    pub fn pair_options(&self) -> PairLossOptions {
        PairLossOptions {
            prefix_in_gradient: self.prefix_in_gradient,
            skip_counting: self.skip_counting,
        }
    }

    /// Decoded tokens per step upper bound, useful for budget planning.
    pub fn max_tokens_per_step(&self, questions: usize) -> usize {
        questions * self.rollout.budget()
    }
}

/// The synthetic task: answer-match questions with uniformly drawn
/// non-EOS targets.
pub fn default_questions(count: usize, shape: &PolicyShape, seed: u64) -> Vec<Question> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x51]));
    let candidates: Vec<u32> = (0..shape.vocab_size).filter(|&t| t != shape.eos_id).collect();
    (0..count as u32)
        .map(|id| Question {
            id,
            prompt: Vec::new(),
            verifier: VerifierSpec::AnswerMatch {
                target: candidates[rng.gen_range(0..candidates.len())],
            },
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub mean_reward: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub pairs_harvested: usize,
    pub pairs_skipped: usize,
    pub trailing_tokens: usize,
    pub effective_samples: usize,
    pub tokens_decoded: usize,
    pub entropy: f64,
    /// Gradient norm coming from inherited-prefix tokens.
    pub prefix_grad_norm: f64,
    /// Gradient difference when skipped pairs are dropped from the loss.
    pub skipped_grad_norm: f64,
}

impl MetricsRow {
    pub const HEADER: [&'static str; 12] = [
        "step",
        "mean_reward",
        "loss",
        "grad_norm",
        "pairs_harvested",
        "pairs_skipped",
        "trailing_tokens",
        "effective_samples",
        "tokens_decoded",
        "entropy",
        "prefix_grad_norm",
        "skipped_grad_norm",
    ];
}

/// Why and where a run stopped early.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainAbort {
    pub step: usize,
    pub reason: String,
    /// The rollout being processed when the failure was detected.
    pub question_id: Option<u32>,
    pub rollout: Option<GroupRollout>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    pub policy: PolicyTable,
    pub tokens_decoded: usize,
    pub abort: Option<TrainAbort>,
}

/// Mean entropy of the first-token distribution across questions.
pub fn question_entropy(policy: &PolicyTable, questions: &[Question]) -> f64 {
    let total: f64 = questions
        .iter()
        .map(|q| entropy(policy, &Context::after(q.id, policy.order(), &q.prompt)))
        .sum();
    total / questions.len() as f64
}

struct StepRollout {
    rollout: GroupRollout,
    rewards: Vec<f64>,
}

fn rollout_question(config: &TrainConfig, policy: &PolicyTable, q: &Question, seed: u64) -> Result<StepRollout> {
    let eos = policy.vocab().eos_id();
    let mut rollout = if config.algorithm.is_eqlen() {
        rollout_dualtrack(policy, q, &config.rollout, seed)?
    } else {
        rollout_independent(policy, q, config.rollout.group_size, config.rollout.max_len, seed)
    };
    score_rollout(&mut rollout, &q.verifier, eos, config.reward_options())?;
    let rewards = if config.algorithm.is_eqlen() {
        rollout.tree.leaf_rewards.values().copied().collect()
    } else {
        rollout.trajectories.iter().filter_map(|t| t.reward).collect()
    };
    Ok(StepRollout { rollout, rewards })
}

fn question_loss(config: &TrainConfig, rollout: &GroupRollout, policy: &PolicyTable, old: &PolicyTable) -> Result<LossOutput> {
    let spec = config.advantage_spec();
    let opts = config.pair_options();
    match config.algorithm {
        Algorithm::Grpo | Algorithm::DrGrpo | Algorithm::Rloo => loss_grpo(rollout, &spec, policy, old),
        Algorithm::EqlenGrpo => loss_eqlen_total(rollout, &spec, policy, old, opts),
        Algorithm::EqlenRloo => loss_eqlen_rloo(rollout, &spec, policy, old, opts),
    }
}

/// Gradient contributed by skipped pairs, measured as the difference
/// between the loss with and without them under per-subgroup counts that
/// ignore skipped pairs.
fn skipped_contribution(config: &TrainConfig, rollout: &GroupRollout, policy: &PolicyTable, old: &PolicyTable) -> Result<GradientVector> {
    let mut cfg = config.clone();
    cfg.skip_counting = SkipCounting::Exclude;
    let with = question_loss(&cfg, rollout, policy, old)?;
    let mut stripped = rollout.clone();
    stripped.pairs.retain(|p| !p.skipped);
    let without = question_loss(&cfg, &stripped, policy, old)?;
    let mut diff = with.grad;
    diff.add_scaled(&without.grad, -1.0);
    Ok(diff)
}

/// Mean of per-question losses, reduced sequentially in question order.
fn batch_loss(config: &TrainConfig, rollouts: &[StepRollout], policy: &PolicyTable, old: &PolicyTable) -> std::result::Result<LossOutput, (EqlenError, usize)> {
    let parts: Vec<Result<LossOutput>> = rollouts
        .par_iter()
        .map(|r| question_loss(config, &r.rollout, policy, old))
        .collect();
    let mut total = LossOutput::zero(policy.vocab().len());
    let scale = 1.0 / rollouts.len() as f64;
    for (i, part) in parts.into_iter().enumerate() {
        let part = part.map_err(|e| (e, i))?;
        if !part.loss.is_finite() || !part.grad.is_finite() {
            return Err((EqlenError::Numerical(format!("non-finite loss {} on question {}", part.loss, rollouts[i].rollout.question_id)), i));
        }
        total.accumulate(&part, scale);
    }
    Ok(total)
}

enum StepResult {
    Done { row: MetricsRow, policy: PolicyTable },
    Failed(TrainAbort),
}

fn run_step(config: &TrainConfig, questions: &[Question], policy: &PolicyTable, step: usize) -> Result<StepResult> {
    let seed = derive_seed(config.seed, &[step as u64]);
    let rollouts: Vec<StepRollout> = questions
        .par_iter()
        .map(|q| rollout_question(config, policy, q, seed))
        .collect::<Result<_>>()?;
    let old = policy.clone();
    let fail = |reason: String, idx: Option<usize>| {
        StepResult::Failed(TrainAbort {
            step,
            reason,
            question_id: idx.map(|i| rollouts[i].rollout.question_id),
            rollout: idx.map(|i| rollouts[i].rollout.clone()),
        })
    };

    let mut current = policy.clone();
    let mut first: Option<LossOutput> = None;
    for _ in 0..config.epochs_per_rollout {
        let loss = match batch_loss(config, &rollouts, &current, &old) {
            Ok(l) => l,
            Err((EqlenError::Numerical(m), i)) => return Ok(fail(m, Some(i))),
            Err((e, _)) => return Err(e),
        };
        let next = match sgd_step(&current, &loss.grad, config.lr) {
            Ok(p) => p,
            Err(e) => return Ok(fail(e.to_string(), None)),
        };
        if let Some(bad) = next.stored_contexts().find(|c| next.logits_for(c).iter().any(|x| !x.is_finite())) {
            return Ok(fail(format!("update produced non-finite logits at {bad:?}"), None));
        }
        current = next;
        first.get_or_insert(loss);
    }
    let loss = first.expect("at least one epoch");

    let mut skipped_norm = 0.0;
    if config.algorithm.is_eqlen() {
        let mut diff = GradientVector::zeros(policy.vocab().len());
        for r in &rollouts {
            diff.add_scaled(&skipped_contribution(config, &r.rollout, policy, &old)?, 1.0 / rollouts.len() as f64);
        }
        skipped_norm = diff.norm();
    }
    let all_rewards: Vec<f64> = rollouts.iter().flat_map(|r| r.rewards.iter().copied()).collect();
    let sum = |f: &dyn Fn(&GroupRollout) -> usize| rollouts.iter().map(|r| f(&r.rollout)).sum::<usize>();
    let row = MetricsRow {
        step,
        mean_reward: if all_rewards.is_empty() {
            0.0
        } else {
            all_rewards.iter().sum::<f64>() / all_rewards.len() as f64
        },
        loss: loss.loss,
        grad_norm: loss.grad.norm(),
        pairs_harvested: sum(&|r| r.pairs.len()),
        pairs_skipped: sum(&|r| r.pairs.iter().filter(|p| p.skipped).count()),
        trailing_tokens: if config.algorithm.is_eqlen() { sum(&trailing_tokens) } else { 0 },
        effective_samples: sum(&effective_sample_count),
        tokens_decoded: sum(&|r| r.token_budget_used),
        entropy: question_entropy(policy, questions),
        prefix_grad_norm: loss.prefix_grad.norm(),
        skipped_grad_norm: skipped_norm,
    };
    Ok(StepResult::Done { row, policy: current })
}

/// When to stop a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopRule {
    /// Run exactly `config.steps` steps.
    Steps,
    /// Run until the decoded-token total is as close as a step boundary
    /// allows to this budget.
    TokenBudget(usize),
}

pub fn train(config: &TrainConfig, questions: &[Question], policy: PolicyTable) -> Result<TrainOutcome> {
    train_until(config, questions, policy, StopRule::Steps)
}

pub fn train_until(config: &TrainConfig, questions: &[Question], mut policy: PolicyTable, stop: StopRule) -> Result<TrainOutcome> {
    config.validate()?;
    if questions.is_empty() {
        return Err(EqlenError::InvalidInput("question set is empty".into()));
    }
    if policy.vocab() != &config.policy.vocab()? || policy.order() != config.policy.order {
        return Err(EqlenError::config("policy", "initial policy does not match the configured shape"));
    }
    for q in questions {
        q.verifier.validate()?;
    }
    let mut metrics: Vec<MetricsRow> = Vec::new();
    let mut tokens = 0usize;
    let mut step = 0usize;
    loop {
        match stop {
            StopRule::Steps if step >= config.steps => break,
            StopRule::TokenBudget(b) if tokens >= b => break,
            _ => {}
        }
        match run_step(config, questions, &policy, step)? {
            StepResult::Failed(abort) => {
                return Ok(TrainOutcome {
                    metrics,
                    policy,
                    tokens_decoded: tokens,
                    abort: Some(abort),
                })
            }
            StepResult::Done { row, policy: next } => {
                let after = tokens + row.tokens_decoded;
                if let StopRule::TokenBudget(b) = stop {
                    // Keep the step only if it brings the total closer.
                    if after > b && after - b > b - tokens && !metrics.is_empty() {
                        break;
                    }
                }
                tokens = after;
                metrics.push(row);
                policy = next;
            }
        }
        step += 1;
    }
    Ok(TrainOutcome {
        metrics,
        policy,
        tokens_decoded: tokens,
        abort: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub algorithm: Algorithm,
    pub steps: usize,
    pub tokens_decoded: usize,
    pub final_mean_reward: f64,
    pub effective_samples: usize,
    pub final_entropy: f64,
    pub prefix_grad_mass: f64,
    pub metrics: Vec<MetricsRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub token_budget: usize,
    pub arm_a: ArmSummary,
    pub arm_b: ArmSummary,
    /// `|tokens_a − tokens_b| / max(tokens_a, tokens_b)`.
    pub token_gap: f64,
    pub budget_matched: bool,
}

fn summarize(config: &TrainConfig, out: TrainOutcome, questions: &[Question]) -> Result<ArmSummary> {
    if let Some(a) = out.abort {
        return Err(EqlenError::Numerical(format!("arm {:?} aborted at step {}: {}", config.algorithm, a.step, a.reason)));
    }
    let tail = out.metrics.len().min(10);
    let tail_rows = &out.metrics[out.metrics.len() - tail..];
    Ok(ArmSummary {
        algorithm: config.algorithm,
        steps: out.metrics.len(),
        tokens_decoded: out.tokens_decoded,
        final_mean_reward: if tail == 0 {
            0.0
        } else {
            tail_rows.iter().map(|r| r.mean_reward).sum::<f64>() / tail as f64
        },
        effective_samples: out.metrics.iter().map(|r| r.effective_samples).sum(),
        final_entropy: question_entropy(&out.policy, questions),
        prefix_grad_mass: out.metrics.iter().map(|r| r.prefix_grad_norm).sum(),
        metrics: out.metrics,
    })
}

/// Train arm A for its configured steps, then train arm B to the same
/// decoded-token total.
pub fn compare_arms(config_a: &TrainConfig, config_b: &TrainConfig, questions: &[Question]) -> Result<CompareReport> {
    if config_a.seed != config_b.seed {
        return Err(EqlenError::config("seed", "both arms must share a seed"));
    }
    let a = train(config_a, questions, config_a.policy.uniform_policy()?)?;
    let budget = a.tokens_decoded;
    let b = train_until(config_b, questions, config_b.policy.uniform_policy()?, StopRule::TokenBudget(budget))?;
    let arm_a = summarize(config_a, a, questions)?;
    let arm_b = summarize(config_b, b, questions)?;
    let hi = arm_a.tokens_decoded.max(arm_b.tokens_decoded).max(1) as f64;
    let gap = arm_a.tokens_decoded.abs_diff(arm_b.tokens_decoded) as f64 / hi;
    Ok(CompareReport {
        token_budget: budget,
        arm_a,
        arm_b,
        token_gap: gap,
        budget_matched: gap <= 0.01,
    })
}

/// Single-pair mode only matters for pair-based algorithms.
pub fn effective_pair_mode(config: &TrainConfig) -> Option<PairMode> {
    config.algorithm.is_eqlen().then_some(config.rollout.pair_mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(algorithm: Algorithm, steps: usize) -> TrainConfig {
        TrainConfig {
            algorithm,
            steps,
            rollout: RolloutConfig::new(4, 8),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_returns_base_policy() {
        let cfg = small(Algorithm::EqlenGrpo, 0);
        let qs = default_questions(4, &cfg.policy, 0);
        let p = cfg.policy.uniform_policy().unwrap();
        let out = train(&cfg, &qs, p.clone()).unwrap();
        assert_eq!(out.policy, p);
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn runs_every_algorithm() {
        for alg in [Algorithm::Grpo, Algorithm::DrGrpo, Algorithm::Rloo, Algorithm::EqlenGrpo, Algorithm::EqlenRloo] {
            let cfg = small(alg, 3);
            let qs = default_questions(4, &cfg.policy, 0);
            let out = train(&cfg, &qs, cfg.policy.uniform_policy().unwrap()).unwrap();
            assert_eq!(out.metrics.len(), 3);
            assert!(out.abort.is_none());
            for (i, r) in out.metrics.iter().enumerate() {
                assert_eq!(r.step, i);
                assert_eq!(r.skipped_grad_norm, 0.0);
            }
        }
    }

    #[test]
    fn same_seed_same_metrics() {
        let cfg = small(Algorithm::EqlenGrpo, 4);
        let qs = default_questions(4, &cfg.policy, 0);
        let a = train(&cfg, &qs, cfg.policy.uniform_policy().unwrap()).unwrap();
        let b = train(&cfg, &qs, cfg.policy.uniform_policy().unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation_names_fields() {
        let mut cfg = small(Algorithm::EqlenGrpo, 1);
        cfg.rollout.group_size = 3;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("group_size"), "{msg}");
        let mut cfg = small(Algorithm::Grpo, 1);
        cfg.rollout.group_size = 3;
        cfg.validate().unwrap();
        cfg.advantage.family = Some(AdvantageFamily::Rloo);
        assert!(cfg.validate().unwrap_err().to_string().contains("advantage.family"));
        let mut cfg = small(Algorithm::Grpo, 1);
        cfg.lr = 0.0;
        assert!(cfg.validate().unwrap_err().to_string().contains("lr"));
    }

    #[test]
    fn runaway_learning_rate_aborts() {
        let mut cfg = small(Algorithm::Grpo, 50);
        cfg.lr = 1e307;
        let qs = default_questions(4, &cfg.policy, 0);
        let mut p = cfg.policy.uniform_policy().unwrap();
        p.set_default_logits(vec![1.797e308; 16]).unwrap();
        let out = train(&cfg, &qs, p).unwrap();
        let abort = out.abort.expect("run should abort");
        assert_eq!(out.metrics.len(), abort.step);
    }

    #[test]
    fn identical_arms_match() {
        let cfg = small(Algorithm::EqlenGrpo, 3);
        let qs = default_questions(4, &cfg.policy, 0);
        let r = compare_arms(&cfg, &cfg, &qs).unwrap();
        assert_eq!(r.arm_a, r.arm_b);
        assert_eq!(r.token_gap, 0.0);
    }
}
