//! Executable constructions: the entropy-collapse and learning-tax
//! instances, the length-bias arithmetic, and efficiency accounting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EqlenError, Result};
use crate::optim::{loss_eqlen_total, loss_grpo, sgd_step, AdvantageFamily, AdvantageSpec, PairLossOptions};
use crate::policy::{grad_log_prob, segment_contexts, sequence_log_prob};
use crate::reward::{score_rollout, score_trajectory, RewardOptions, VerifierSpec};
use crate::rng::{RngStream, StreamKey};
use crate::rollout::{effective_sample_count, rollout_dualtrack, rollout_independent, RolloutConfig};
use crate::types::{
    Context, GenerationTree, GradientVector, GroupRollout, PolicyTable, Question, RolloutKind, SegmentEnd, SegmentNode, SegmentPair, TokenId, Trajectory,
    TrajectoryEnd, Vocab,
};

/// Three responses sharing the prefix `B1`: `A1` (correct), `B1+A2`
/// (incorrect) and `B1+B2+A3` (correct), with `|A1| = |B1|` and
/// `|A2| = |B2|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Instance {
    pub question_id: u32,
    pub target: TokenId,
    pub a1: Vec<TokenId>,
    pub b1: Vec<TokenId>,
    pub a2: Vec<TokenId>,
    pub b2: Vec<TokenId>,
    pub a3: Vec<TokenId>,
    pub policy: PolicyTable,
}

impl Prop1Instance {
    /// Vocab 8 (EOS 7), answer token 5, order-2 contexts, uniform policy.
    /// `B1`'s contexts are disjoint from those of every later segment.
    pub fn canonical() -> Self {
        let vocab = Vocab::new(8, 7).expect("static vocab");
        Prop1Instance {
            question_id: 0,
            target: 5,
            a1: vec![1, 2, 5, 7],
            b1: vec![3, 4, 6, 2],
            a2: vec![0, 1, 0, 1, 6, 7],
            b2: vec![1, 1, 0, 0, 1, 1],
            a3: vec![2, 0, 3, 5, 7],
            policy: PolicyTable::new(vocab, 2),
        }
    }

    pub fn verifier(&self) -> VerifierSpec {
        VerifierSpec::AnswerMatch { target: self.target }
    }

    pub fn short_correct(&self) -> Vec<TokenId> {
        self.a1.clone()
    }

    pub fn long_incorrect(&self) -> Vec<TokenId> {
        [self.b1.as_slice(), &self.a2].concat()
    }

    pub fn long_correct(&self) -> Vec<TokenId> {
        [self.b1.as_slice(), &self.b2, &self.a3].concat()
    }

    /// `L⁻ = |B1| + |A2|`.
    pub fn len_minus(&self) -> usize {
        self.b1.len() + self.a2.len()
    }

    /// `L⁺ = |B1| + |B2| + |A3|`.
    pub fn len_plus(&self) -> usize {
        self.b1.len() + self.b2.len() + self.a3.len()
    }

    /// Contexts at which the tokens of `B1` are generated.
    pub fn b1_contexts(&self) -> Vec<Context> {
        segment_contexts(self.policy.order(), self.question_id, &[], &self.b1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EqlenError::InvalidInput(format!("prop1 instance: {m}")));
        if self.a1.len() != self.b1.len() || self.a2.len() != self.b2.len() {
            return bad("segment lengths must match pairwise");
        }
        let vocab = self.policy.vocab();
        let eos = vocab.eos_id();
        let responses = [self.short_correct(), self.long_incorrect(), self.long_correct()];
        for r in &responses {
            if !r.iter().all(|&t| vocab.contains(t)) {
                return bad("token outside vocab");
            }
            if r.last() != Some(&eos) || r[..r.len() - 1].contains(&eos) {
                return bad("each response must end with its only EOS");
            }
            let lp = sequence_log_prob(&self.policy, self.question_id, &[], r);
            if !lp.is_finite() {
                return bad("response has zero probability");
            }
        }
        let v = self.verifier();
        let scores: Vec<f64> = responses.iter().map(|r| score_trajectory(&v, eos, r, TrajectoryEnd::Eos)).collect();
        if scores != [1.0, 0.0, 1.0] {
            return bad("responses must score (1, 0, 1)");
        }
        let b1: std::collections::BTreeSet<Context> = self.b1_contexts().into_iter().collect();
        let later = segment_contexts(self.policy.order(), self.question_id, &self.b1, &[self.a2.as_slice(), &self.b2, &self.a3].concat());
        if later.iter().any(|c| b1.contains(c)) {
            return bad("B1 contexts must not recur in later segments");
        }
        Ok(())
    }

    /// The GRPO group `(A1, B1+A2)`, already scored.
    pub fn grpo_group(&self) -> GroupRollout {
        let traj = |id, tokens: Vec<TokenId>, r| Trajectory {
            track_id: id,
            tokens,
            end: TrajectoryEnd::Eos,
            reward: Some(r),
        };
        GroupRollout {
            question_id: self.question_id,
            kind: RolloutKind::Independent,
            prompt: Vec::new(),
            trajectories: vec![traj(0, self.short_correct(), 1.0), traj(1, self.long_incorrect(), 0.0)],
            pairs: Vec::new(),
            subgroups: Vec::new(),
            tree: GenerationTree::default(),
            token_budget_used: self.a1.len() + self.len_minus(),
        }
    }

    /// The dual-track material: pairs `(A1, B1)` and `(A2, B2)`, with `A3`
    /// finishing the surviving track. Rewards are propagated with the
    /// given options.
    pub fn eqlen_rollout(&self, opts: RewardOptions) -> Result<GroupRollout> {
        let mut tree = GenerationTree::default();
        let node = |parent, track_id, relaunch, start: usize, tokens: &[TokenId], end_state| SegmentNode {
            id: 0,
            parent,
            subgroup_index: 0,
            track_id,
            relaunch,
            start,
            end: start + tokens.len(),
            tokens: tokens.to_vec(),
            end_state,
        };
        let l1 = self.a1.len();
        let l2 = l1 + self.a2.len();
        let a1 = tree.add(node(None, 0, 0, 0, &self.a1, SegmentEnd::Eos));
        let b1 = tree.add(node(None, 1, 0, 0, &self.b1, SegmentEnd::Open));
        let a2 = tree.add(node(Some(b1), 0, 1, l1, &self.a2, SegmentEnd::Eos));
        let b2 = tree.add(node(Some(b1), 1, 0, l1, &self.b2, SegmentEnd::Open));
        tree.add(node(Some(b2), 1, 0, l2, &self.a3, SegmentEnd::Eos));
        let pair = |idx, context: Vec<TokenId>, prefix, plus: &[TokenId], minus: &[TokenId], pn, mn| SegmentPair {
            pair_index: idx,
            subgroup_index: 0,
            context_tokens: context,
            inherited_prefix_len: prefix,
            seg_plus: plus.to_vec(),
            seg_minus: minus.to_vec(),
            length: plus.len(),
            reward_plus: None,
            reward_minus: None,
            skipped: false,
            skip_reason: None,
            plus_node: pn,
            minus_node: mn,
            simultaneous: false,
        };
        let pairs = vec![
            pair(0, Vec::new(), 0, &self.a1, &self.b1, a1, b1),
            pair(1, self.b1.clone(), self.b1.len(), &self.a2, &self.b2, a2, b2),
        ];
        let mut rollout = GroupRollout {
            question_id: self.question_id,
            kind: RolloutKind::DualTrack,
            prompt: Vec::new(),
            trajectories: Vec::new(),
            pairs,
            subgroups: Vec::new(),
            tree,
            token_budget_used: 2 * l2 + self.a3.len(),
        };
        score_rollout(&mut rollout, &self.verifier(), self.policy.vocab().eos_id(), opts)?;
        Ok(rollout)
    }

    fn prefix_prob(&self, policy: &PolicyTable) -> f64 {
        sequence_log_prob(policy, self.question_id, &[], &self.b1).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Report {
    pub lr: f64,
    pub prefix_prob_before: f64,
    pub prefix_prob_after_grpo: f64,
    pub strictly_decreased: bool,
    /// Norm of the GRPO gradient on the contexts that generate `B1`.
    pub prefix_grad_grpo: f64,
    /// Norm of the EqLen gradient on the contexts that generate `B1`.
    pub prefix_prob_grad_eqlen: f64,
    /// Same norm with the inherited prefix put back into the gradient. The
    /// prefix enters both segments with opposite advantages, so on-policy
    /// this cancels to rounding error.
    pub prefix_grad_unmasked: f64,
    pub first_pair_skipped: bool,
    pub first_pair_rewards: (f64, f64),
}

pub fn run_prop1(instance: &Prop1Instance, lr: f64) -> Result<Prop1Report> {
    if !(lr > 0.0) {
        return Err(EqlenError::InvalidInput(format!("lr {lr} must be positive")));
    }
    instance.validate()?;
    let policy = &instance.policy;
    let spec = AdvantageSpec::new(AdvantageFamily::GrpoNorm);
    let grpo = loss_grpo(&instance.grpo_group(), &spec, policy, policy)?;
    let after = sgd_step(policy, &grpo.grad, lr)?;

    let rollout = instance.eqlen_rollout(RewardOptions::default())?;
    let b1 = instance.b1_contexts();
    let masked = loss_eqlen_total(&rollout, &spec, policy, policy, PairLossOptions::default())?;
    let unmasked = loss_eqlen_total(
        &rollout,
        &spec,
        policy,
        policy,
        PairLossOptions {
            prefix_in_gradient: true,
            ..Default::default()
        },
    )?;
    let first = &rollout.pairs[0];
    let before = instance.prefix_prob(policy);
    let after_p = instance.prefix_prob(&after);
    Ok(Prop1Report {
        lr,
        prefix_prob_before: before,
        prefix_prob_after_grpo: after_p,
        strictly_decreased: after_p < before,
        prefix_grad_grpo: grpo.grad.norm_restricted(&b1),
        prefix_prob_grad_eqlen: masked.grad.norm_restricted(&b1),
        prefix_grad_unmasked: unmasked.grad.norm_restricted(&b1),
        first_pair_skipped: first.skipped,
        first_pair_rewards: (first.reward_plus.unwrap_or(f64::NAN), first.reward_minus.unwrap_or(f64::NAN)),
    })
}

/// The learning-tax setting: two pairing events drawn with probabilities
/// `(p, 1 − p)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop2Instance {
    pub base: Prop1Instance,
    pub p: f64,
}

impl Prop2Instance {
    /// `p = L⁻ / (L⁻ + L⁺)`, the zero-mean pairing probability.
    pub fn canonical() -> Self {
        let base = Prop1Instance::canonical();
        let p = base.len_minus() as f64 / (base.len_minus() + base.len_plus()) as f64;
        Prop2Instance { base, p }
    }

    pub fn with_p(mut self, p: f64) -> Self {
        self.p = p;
        self
    }

    pub fn nominal_p(&self) -> f64 {
        let (lm, lp) = (self.base.len_minus() as f64, self.base.len_plus() as f64);
        lm / (lm + lp)
    }

    /// `v = Σ_t ∇ log π(b_t | ·)`, the summed score of the shared prefix.
    pub fn prefix_score(&self) -> GradientVector {
        let b = &self.base;
        let mut v = GradientVector::zeros(b.policy.vocab().len());
        for (ctx, &tok) in b.b1_contexts().iter().zip(&b.b1) {
            v.add_scaled(&grad_log_prob(&b.policy, ctx, tok), 1.0);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftPoint {
    pub step: usize,
    pub drift_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop2Report {
    pub p: f64,
    pub nominal_p: f64,
    pub steps: usize,
    pub trials: usize,
    pub grad_mean_norm: f64,
    pub grad_variance: f64,
    pub closed_form_variance: f64,
    pub variance_rel_error: f64,
    /// `4 σ / √(T · trials)`.
    pub clt_bound: f64,
    pub mean_within_clt: bool,
    /// Set when the mean is detectably nonzero (outside the bound).
    pub negative_control: bool,
    pub drift_std_by_t: Vec<DriftPoint>,
    pub fitted_slope: f64,
    /// Largest cumulative EqLen gradient norm on `B1` contexts.
    pub eqlen_drift_max: f64,
}

/// Least-squares slope of `y` on `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Simulate GRPO pairing events on the shared prefix and measure mean,
/// variance and cumulative drift of its gradient.
///
/// Event one (probability `p`) pairs `A1` with `B1+A2` and pushes `+v/L⁻`
/// onto the prefix; event two pairs `B1+A2` with `B1+B2+A3` and pushes
/// `−v/L⁺`. Every gradient is a multiple of `v`, so each trial tracks that
/// scalar multiple.
pub fn run_prop2(instance: &Prop2Instance, steps: usize, trials: usize, seed: u64) -> Result<Prop2Report> {
    if steps < 100 || trials < 30 {
        return Err(EqlenError::InvalidInput(format!("prop2 needs T >= 100 and trials >= 30, got {steps} and {trials}")));
    }
    if !(0.0..=1.0).contains(&instance.p) {
        return Err(EqlenError::InvalidInput(format!("p = {} outside [0, 1]", instance.p)));
    }
    instance.base.validate()?;
    let lm = instance.base.len_minus() as f64;
    let lp = instance.base.len_plus() as f64;
    let v = instance.prefix_score();
    let v_norm = v.norm();
    let checkpoints: Vec<usize> = (1..=10).map(|i| (i * steps) / 10).collect();

    struct Trial {
        sum: f64,
        sum_sq: f64,
        at_checkpoints: Vec<f64>,
    }
    let per_trial: Vec<Trial> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = RngStream::new(seed, StreamKey::new(instance.base.question_id, trial as u32, 0));
            let mut cum = 0.0;
            let mut sum_sq = 0.0;
            let mut at = Vec::with_capacity(checkpoints.len());
            let mut next = 0;
            for t in 1..=steps {
                let c = if rng.uniform() < instance.p { 1.0 / lm } else { -1.0 / lp };
                cum += c;
                sum_sq += c * c;
                if next < checkpoints.len() && checkpoints[next] == t {
                    at.push(cum);
                    next += 1;
                }
            }
            Trial {
                sum: cum,
                sum_sq,
                at_checkpoints: at,
            }
        })
        .collect();

    let n = (steps * trials) as f64;
    let mean_c = per_trial.iter().map(|t| t.sum).sum::<f64>() / n;
    let mean_sq = per_trial.iter().map(|t| t.sum_sq).sum::<f64>() / n;
    let var_c = mean_sq - mean_c * mean_c;
    let grad_mean_norm = mean_c.abs() * v_norm;
    let grad_variance = var_c * v_norm * v_norm;
    let p = instance.p;
    let closed = p * v_norm * v_norm / (lm * lm) + (1.0 - p) * v_norm * v_norm / (lp * lp);
    let clt_bound = 4.0 * grad_variance.sqrt() / n.sqrt();

    let drift_std_by_t: Vec<DriftPoint> = checkpoints
        .iter()
        .enumerate()
        .map(|(i, &step)| {
            let xs: Vec<f64> = per_trial.iter().map(|t| t.at_checkpoints[i] * v_norm).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
            DriftPoint {
                step,
                drift_std: var.sqrt(),
            }
        })
        .collect();
    let lx: Vec<f64> = drift_std_by_t.iter().map(|d| (d.step as f64).ln()).collect();
    let ly: Vec<f64> = drift_std_by_t.iter().map(|d| d.drift_std.ln()).collect();

    // Under EqLen both events produce the same pair structure, so the
    // prefix gradient is the same each step.
    let rollout = instance.base.eqlen_rollout(RewardOptions::default())?;
    let policy = &instance.base.policy;
    let spec = AdvantageSpec::new(AdvantageFamily::GrpoNorm);
    let eq = loss_eqlen_total(&rollout, &spec, policy, policy, PairLossOptions::default())?;
    let per_step = eq.grad.norm_restricted(&instance.base.b1_contexts());
    let eqlen_drift_max = per_step * steps as f64;

    Ok(Prop2Report {
        p,
        nominal_p: instance.nominal_p(),
        steps,
        trials,
        grad_mean_norm,
        grad_variance,
        closed_form_variance: closed,
        variance_rel_error: (grad_variance - closed).abs() / closed,
        clt_bound,
        mean_within_clt: grad_mean_norm <= clt_bound,
        negative_control: grad_mean_norm > clt_bound,
        drift_std_by_t,
        fitted_slope: ols_slope(&lx, &ly),
        eqlen_drift_max,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBiasReport {
    pub short_len: usize,
    pub long_len: usize,
    pub per_token_short: f64,
    pub per_token_long: f64,
    pub ratio: f64,
}

/// GRPO on a correct short trajectory and an incorrect long one at
/// `ρ = 1`: the per-token gradient magnitude of each.
///
/// The context order exceeds both lengths, so every token past the first
/// owns its own logit row and the row norm is exactly that token's
/// contribution.
pub fn length_bias(short_len: usize, long_len: usize) -> Result<LengthBiasReport> {
    if short_len < 2 || long_len < 2 {
        return Err(EqlenError::InvalidInput("trajectories need at least two tokens".into()));
    }
    let vocab = Vocab::new(4, 3)?;
    let policy = PolicyTable::new(vocab, short_len.max(long_len) + 1);
    let traj = |id, tok: TokenId, len: usize, r| {
        let mut tokens = vec![tok; len - 1];
        tokens.push(3);
        Trajectory {
            track_id: id,
            tokens,
            end: TrajectoryEnd::Eos,
            reward: Some(r),
        }
    };
    let group = GroupRollout {
        question_id: 0,
        kind: RolloutKind::Independent,
        prompt: Vec::new(),
        trajectories: vec![traj(0, 1, short_len, 1.0), traj(1, 2, long_len, 0.0)],
        pairs: Vec::new(),
        subgroups: Vec::new(),
        tree: GenerationTree::default(),
        token_budget_used: short_len + long_len,
    };
    let spec = AdvantageSpec::new(AdvantageFamily::GrpoNorm);
    let out = loss_grpo(&group, &spec, &policy, &policy)?;
    let per_token = |t: &Trajectory| {
        let ctxs = segment_contexts(policy.order(), 0, &[], &t.tokens);
        let norms: Vec<f64> = ctxs[1..]
            .iter()
            .map(|c| out.grad.row(c).map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).unwrap_or(0.0))
            .collect();
        norms.iter().sum::<f64>() / norms.len() as f64
    };
    let s = per_token(&group.trajectories[0]);
    let l = per_token(&group.trajectories[1]);
    Ok(LengthBiasReport {
        short_len,
        long_len,
        per_token_short: s,
        per_token_long: l,
        ratio: s / l,
    })
}

/// The recorded efficiency numbers and the identities they satisfy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Check {
    pub grpo_samples: f64,
    pub eqlen_samples: f64,
    pub gpu_hours: f64,
    pub grpo_per_hour: f64,
    pub grpo_per_hour_rounded: f64,
    pub eqlen_per_hour: f64,
    pub eqlen_per_hour_rounded: f64,
    /// Ratio of the rounded per-hour figures.
    pub ratio: f64,
}

pub fn table2_identities() -> Table2Check {
    let (grpo, eqlen, hours) = (8520.0, 51456.0, 48.0);
    let g = grpo / hours;
    let e = eqlen / hours;
    Table2Check {
        grpo_samples: grpo,
        eqlen_samples: eqlen,
        gpu_hours: hours,
        grpo_per_hour: g,
        grpo_per_hour_rounded: g.round(),
        eqlen_per_hour: e,
        eqlen_per_hour_rounded: e.round(),
        ratio: e.round() / g.round(),
    }
}

/// Reward structure of the simulated question set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EfficiencyTask {
    /// Token sum parity: roughly balanced rewards.
    #[default]
    Parity,
    /// Last token before EOS: rewards near `1 / (vocab − 1)`.
    AnswerMatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EfficiencyConfig {
    pub questions: usize,
    pub task: EfficiencyTask,
    pub vocab_size: u32,
    /// Per-token EOS probability of the sampling policy.
    pub eos_hazard: f64,
    pub group_size: usize,
    pub max_len: usize,
    pub max_pairs_per_subgroup: usize,
    pub bootstrap_resamples: usize,
    pub seed: u64,
}

impl Default for EfficiencyConfig {
    fn default() -> Self {
        EfficiencyConfig {
            questions: 1000,
            task: EfficiencyTask::Parity,
            vocab_size: 16,
            eos_hazard: 0.1,
            group_size: 16,
            max_len: 64,
            max_pairs_per_subgroup: 8,
            bootstrap_resamples: 1000,
            seed: 0,
        }
    }
}

impl EfficiencyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.questions == 0 {
            return Err(EqlenError::config("questions", "must be positive"));
        }
        if self.vocab_size < 2 {
            return Err(EqlenError::config("vocab_size", "must be at least 2"));
        }
        if !(self.eos_hazard > 0.0 && self.eos_hazard <= 1.0) {
            return Err(EqlenError::config("eos_hazard", "must lie in (0, 1]"));
        }
        if self.bootstrap_resamples == 0 {
            return Err(EqlenError::config("bootstrap_resamples", "must be positive"));
        }
        self.rollout().validate()
    }

    pub fn rollout(&self) -> RolloutConfig {
        RolloutConfig {
            max_pairs_per_subgroup: self.max_pairs_per_subgroup,
            ..RolloutConfig::new(self.group_size, self.max_len)
        }
    }

    /// Uniform over non-EOS tokens, EOS with probability `eos_hazard`.
    pub fn policy(&self) -> PolicyTable {
        let vocab = Vocab::new(self.vocab_size, self.vocab_size - 1).expect("validated vocab");
        let mut policy = PolicyTable::new(vocab, 2);
        let others = f64::from(self.vocab_size - 1);
        let eos_logit = if self.eos_hazard >= 1.0 {
            1e3
        } else {
            (self.eos_hazard * others / (1.0 - self.eos_hazard)).ln()
        };
        let mut row = vec![0.0; self.vocab_size as usize];
        row[self.vocab_size as usize - 1] = eos_logit;
        policy.set_default_logits(row).expect("finite row");
        policy
    }

    pub fn question_set(&self) -> Vec<Question> {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::rng::derive_seed(self.seed, &[0xE5]));
        (0..self.questions as u32)
            .map(|id| Question {
                id,
                prompt: Vec::new(),
                verifier: match self.task {
                    EfficiencyTask::Parity => VerifierSpec::Parity { target: rng.gen_range(0..2) },
                    EfficiencyTask::AnswerMatch => VerifierSpec::AnswerMatch {
                        target: rng.gen_range(0..self.vocab_size - 1),
                    },
                },
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub config: EfficiencyConfig,
    pub pairs_per_subgroup: f64,
    pub skip_rate: f64,
    pub effective_samples_eqlen: usize,
    pub effective_samples_grpo: usize,
    pub tokens_eqlen: usize,
    pub tokens_grpo: usize,
    pub samples_per_token_eqlen: f64,
    pub samples_per_token_grpo: f64,
    /// `None` when the baseline arm has no effective samples.
    pub samples_per_token_ratio: Option<f64>,
    /// 95% percentile bootstrap interval over questions.
    pub ratio_ci: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy)]
struct QuestionTally {
    eff_eq: usize,
    tok_eq: usize,
    eff_gr: usize,
    tok_gr: usize,
    pairs: usize,
    skipped: usize,
}

fn ratio_of(t: &[QuestionTally]) -> Option<f64> {
    let sum = |f: fn(&QuestionTally) -> usize| t.iter().map(f).sum::<usize>() as f64;
    let eq = sum(|q| q.eff_eq) / sum(|q| q.tok_eq).max(1.0);
    let gr = sum(|q| q.eff_gr) / sum(|q| q.tok_gr).max(1.0);
    (gr > 0.0).then(|| eq / gr)
}

/// Run both samplers on every question with the same seed and compare
/// effective samples per decoded token.
pub fn run_efficiency(config: &EfficiencyConfig, policy: &PolicyTable, questions: &[Question]) -> Result<EfficiencyReport> {
    config.validate()?;
    let rc = config.rollout();
    let eos = policy.vocab().eos_id();
    let opts = RewardOptions::default();
    let tallies: Vec<QuestionTally> = questions
        .par_iter()
        .map(|q| -> Result<QuestionTally> {
            let mut dual = rollout_dualtrack(policy, q, &rc, config.seed)?;
            score_rollout(&mut dual, &q.verifier, eos, opts)?;
            // Independent groups are drawn until they have decoded at least
            // as many tokens as the dual-track rollout.
            let (mut eff_gr, mut tok_gr, mut round) = (0, 0, 0u64);
            while tok_gr < dual.token_budget_used.max(1) {
                let seed = crate::rng::derive_seed(config.seed, &[0x1D, round]);
                let mut indep = rollout_independent(policy, q, rc.group_size, rc.max_len, seed);
                score_rollout(&mut indep, &q.verifier, eos, opts)?;
                eff_gr += effective_sample_count(&indep);
                tok_gr += indep.token_budget_used;
                round += 1;
            }
            Ok(QuestionTally {
                eff_eq: effective_sample_count(&dual),
                tok_eq: dual.token_budget_used,
                eff_gr,
                tok_gr,
                pairs: dual.pairs.len(),
                skipped: dual.pairs.iter().filter(|p| p.skipped).count(),
            })
        })
        .collect::<Result<_>>()?;

    let ratio = ratio_of(&tallies);
    let ratio_ci = ratio.and_then(|_| {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::rng::derive_seed(config.seed, &[0xB0]));
        let n = tallies.len();
        let mut samples: Vec<f64> = (0..config.bootstrap_resamples)
            .filter_map(|_| {
                let resample: Vec<QuestionTally> = (0..n).map(|_| tallies[rng.gen_range(0..n)]).collect();
                ratio_of(&resample)
            })
            .collect();
        if samples.is_empty() {
            return None;
        }
        samples.sort_by(f64::total_cmp);
        let at = |q: f64| samples[((samples.len() - 1) as f64 * q).round() as usize];
        Some((at(0.025), at(0.975)))
    });
    let total = |f: fn(&QuestionTally) -> usize| tallies.iter().map(f).sum::<usize>();
    let pairs = total(|t| t.pairs);
    let subgroups = questions.len() * rc.subgroups();
    Ok(EfficiencyReport {
        config: config.clone(),
        pairs_per_subgroup: pairs as f64 / subgroups as f64,
        skip_rate: if pairs == 0 { 0.0 } else { total(|t| t.skipped) as f64 / pairs as f64 },
        effective_samples_eqlen: total(|t| t.eff_eq),
        effective_samples_grpo: total(|t| t.eff_gr),
        tokens_eqlen: total(|t| t.tok_eq),
        tokens_grpo: total(|t| t.tok_gr),
        samples_per_token_eqlen: total(|t| t.eff_eq) as f64 / total(|t| t.tok_eq).max(1) as f64,
        samples_per_token_grpo: total(|t| t.eff_gr) as f64 / total(|t| t.tok_gr).max(1) as f64,
        samples_per_token_ratio: ratio,
        ratio_ci,
    })
}
