//! Advantages, surrogate losses with analytic gradients, and the SGD update.
//!
//! All losses are written as minimization objectives. Every gradient is the
//! exact derivative of the returned loss with respect to the policy logits,
//! except on the clipped branch of the surrogate, where the derivative is
//! taken to be zero.

use serde::{Deserialize, Serialize};

use crate::error::{EqlenError, Result};
use crate::policy::{add_score, log_prob, segment_contexts, token_log_probs};
use crate::types::{GradientVector, GroupRollout, PolicyTable, SegmentPair, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageFamily {
    /// Mean/population-std normalization within the group.
    GrpoNorm,
    /// Mean subtraction only; length normalization is also dropped.
    DrGrpo,
    /// Leave-one-out mean baseline.
    Rloo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvantageSpec {
    pub family: AdvantageFamily,
    /// Clip range `ε`; `None` disables clipping.
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

impl AdvantageSpec {
    pub fn new(family: AdvantageFamily) -> Self {
        AdvantageSpec {
            family,
            epsilon_clip: default_epsilon(),
            length_norm: true,
        }
    }

    pub fn unclipped(mut self) -> Self {
        self.epsilon_clip = None;
        self
    }

    pub fn with_length_norm(mut self, on: bool) -> Self {
        self.length_norm = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.epsilon_clip {
            Some(e) if !(e >= 0.0) || e.is_nan() => {
                Err(EqlenError::config("advantage.epsilon_clip", format!("{e} must be >= 0")))
            }
            _ => Ok(()),
        }
    }

    /// Dr. GRPO always runs without length normalization.
    pub fn effective_length_norm(&self) -> bool {
        self.length_norm && self.family != AdvantageFamily::DrGrpo
    }

    fn objective(&self) -> Objective {
        match (self.family, self.epsilon_clip) {
            (AdvantageFamily::Rloo, None) => Objective::LogProb,
            (_, eps) => Objective::Surrogate(eps),
        }
    }
}

/// Per-token objective shape.
#[derive(Debug, Clone, Copy)]
enum Objective {
    /// `min(ρÂ, clip(ρ)Â)`, or `ρÂ` when `ε` is `None`.
    Surrogate(Option<f64>),
    /// `Â log π`, the plain leave-one-out REINFORCE form.
    LogProb,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Advantages {
    pub advantages: Vec<f64>,
    /// False when the group has zero reward variance.
    pub active: bool,
}

/// Replace the last entry with the negated sum of the others, so the
/// sequential sum of the vector is exactly zero. The change is at most a
/// few ulps for centered inputs.
fn close_sum(mut xs: Vec<f64>) -> Vec<f64> {
    if let Some((last, rest)) = xs.split_last_mut() {
        *last = -rest.iter().sum::<f64>();
    }
    xs
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `(r − mean) / std` with population std; all zeros when `std = 0`.
pub fn grpo_advantages(rewards: &[f64]) -> Advantages {
    let m = mean(rewards);
    let var = rewards.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / rewards.len() as f64;
    let std = var.sqrt();
    if std == 0.0 {
        return Advantages {
            advantages: vec![0.0; rewards.len()],
            active: false,
        };
    }
    Advantages {
        advantages: close_sum(rewards.iter().map(|r| (r - m) / std).collect()),
        active: true,
    }
}

/// `r_i − mean(r_{j≠i})`.
pub fn rloo_advantages(rewards: &[f64]) -> Vec<f64> {
    let others = (rewards.len() - 1) as f64;
    close_sum(
        (0..rewards.len())
            .map(|i| {
                let rest: f64 = rewards.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, r)| r).sum();
                rewards[i] - rest / others
            })
            .collect(),
    )
}

/// `r_i − mean(r)`.
pub fn dr_grpo_advantages(rewards: &[f64]) -> Vec<f64> {
    let m = mean(rewards);
    close_sum(rewards.iter().map(|r| r - m).collect())
}

pub fn family_advantages(family: AdvantageFamily, rewards: &[f64]) -> Vec<f64> {
    match family {
        AdvantageFamily::GrpoNorm => grpo_advantages(rewards).advantages,
        AdvantageFamily::DrGrpo => dr_grpo_advantages(rewards),
        AdvantageFamily::Rloo => {
            // Exact antisymmetric form for pairs.
            if let [a, b] = rewards {
                vec![a - b, b - a]
            } else {
                rloo_advantages(rewards)
            }
        }
    }
}

/// `min(ρÂ, clip(ρ, 1−ε, 1+ε)Â)`; `ε = None` means no clipping.
pub fn clipped_term(ratio: f64, advantage: f64, epsilon: Option<f64>) -> f64 {
    let unclipped = ratio * advantage;
    match epsilon {
        None => unclipped,
        Some(e) => unclipped.min(ratio.clamp(1.0 - e, 1.0 + e) * advantage),
    }
}

/// Derivative of [`clipped_term`] with respect to `log π`: `Âρ` on the
/// unclipped branch, zero when the clip is binding.
fn clipped_term_slope(ratio: f64, advantage: f64, epsilon: Option<f64>) -> f64 {
    let binding = match epsilon {
        None => false,
        Some(e) => (advantage > 0.0 && ratio > 1.0 + e) || (advantage < 0.0 && ratio < 1.0 - e),
    };
    if binding {
        0.0
    } else {
        advantage * ratio
    }
}

/// A token span entering the loss with one shared advantage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedSegment {
    pub question_id: u32,
    pub context_tokens: Vec<TokenId>,
    pub tokens: Vec<TokenId>,
    pub token_mask: Vec<bool>,
    pub advantage: f64,
    pub old_log_probs: Vec<f64>,
    /// Leading entries of `tokens` that are inherited prefix (only nonzero
    /// when the prefix is put back into the gradient).
    #[serde(default)]
    pub prefix_len: usize,
}

impl MaskedSegment {
    /// All tokens unmasked; `old_log_probs` evaluated under `old_policy`.
    pub fn new(old_policy: &PolicyTable, question_id: u32, context_tokens: Vec<TokenId>, tokens: Vec<TokenId>, advantage: f64) -> Self {
        let old_log_probs = token_log_probs(old_policy, question_id, &context_tokens, &tokens);
        MaskedSegment {
            question_id,
            token_mask: vec![true; tokens.len()],
            context_tokens,
            tokens,
            advantage,
            old_log_probs,
            prefix_len: 0,
        }
    }
}

/// Loss value with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: GradientVector,
    /// The part of `grad` contributed by inherited-prefix tokens.
    pub prefix_grad: GradientVector,
    /// False when nothing contributed (zero-variance group, all pairs
    /// skipped, no pairs at all).
    pub active: bool,
}

impl LossOutput {
    pub fn zero(vocab_size: usize) -> Self {
        LossOutput {
            loss: 0.0,
            grad: GradientVector::zeros(vocab_size),
            prefix_grad: GradientVector::zeros(vocab_size),
            active: false,
        }
    }

    /// `self += alpha * other`.
    pub fn accumulate(&mut self, other: &LossOutput, alpha: f64) {
        self.loss += alpha * other.loss;
        self.grad.add_scaled(&other.grad, alpha);
        self.prefix_grad.add_scaled(&other.prefix_grad, alpha);
        self.active |= other.active;
    }
}

/// Add `weight * Σ_t mask_t · term_t` to the loss (with the leading minus
/// sign applied here) and its gradient to `out`.
fn accumulate_segment(out: &mut LossOutput, policy: &PolicyTable, seg: &MaskedSegment, objective: Objective, weight: f64) {
    let contexts = segment_contexts(policy.order(), seg.question_id, &seg.context_tokens, &seg.tokens);
    for (t, ctx) in contexts.iter().enumerate() {
        if !seg.token_mask[t] {
            continue;
        }
        let token = seg.tokens[t];
        let lp = log_prob(policy, ctx, token);
        let (term, slope) = match objective {
            Objective::LogProb => (seg.advantage * lp, seg.advantage),
            Objective::Surrogate(eps) => {
                let ratio = (lp - seg.old_log_probs[t]).exp();
                (
                    clipped_term(ratio, seg.advantage, eps),
                    clipped_term_slope(ratio, seg.advantage, eps),
                )
            }
        };
        out.loss -= weight * term;
        let coeff = -weight * slope;
        add_score(&mut out.grad, policy, ctx, token, coeff);
        if t < seg.prefix_len {
            add_score(&mut out.prefix_grad, policy, ctx, token, coeff);
        }
    }
}

fn segment_weight(spec: &AdvantageSpec, len: usize) -> f64 {
    if spec.effective_length_norm() {
        1.0 / len as f64
    } else {
        1.0
    }
}

/// Group loss over independently sampled trajectories:
/// `−(1/G) Σ_i w_i Σ_t term(ρ_it, Â_i)` with `w_i = 1/|o_i|` under length
/// normalization.
///
/// With the `rloo` family and clipping disabled the per-token term is
/// `Â log π` instead of the ratio surrogate.
pub fn loss_grpo(rollout: &GroupRollout, spec: &AdvantageSpec, policy: &PolicyTable, old_policy: &PolicyTable) -> Result<LossOutput> {
    let rewards: Vec<f64> = rollout
        .trajectories
        .iter()
        .map(|t| {
            t.reward
                .ok_or_else(|| EqlenError::InvalidInput(format!("trajectory {} is unscored", t.track_id)))
        })
        .collect::<Result<_>>()?;
    let mut out = LossOutput::zero(policy.vocab().len());
    if rewards.len() < 2 {
        return Err(EqlenError::InvalidInput("group needs at least two trajectories".into()));
    }
    let adv = match spec.family {
        AdvantageFamily::GrpoNorm => {
            let a = grpo_advantages(&rewards);
            if !a.active {
                return Ok(out);
            }
            a.advantages
        }
        family => family_advantages(family, &rewards),
    };
    let g = rewards.len() as f64;
    let objective = spec.objective();
    for (traj, a) in rollout.trajectories.iter().zip(adv) {
        if a == 0.0 || traj.tokens.is_empty() {
            continue;
        }
        let seg = MaskedSegment::new(old_policy, rollout.question_id, rollout.prompt.clone(), traj.tokens.clone(), a);
        let weight = (1.0 / g) * segment_weight(spec, seg.tokens.len());
        accumulate_segment(&mut out, policy, &seg, objective, weight);
        out.active = true;
    }
    Ok(out)
}

/// Loss options specific to pair-based training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PairLossOptions {
    /// Put the inherited prefix back into both segments (ablation).
    #[serde(default)]
    pub prefix_in_gradient: bool,
    #[serde(default)]
    pub skip_counting: SkipCounting,
}

/// Whether skipped pairs count toward a subgroup's pair total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipCounting {
    #[default]
    Include,
    Exclude,
}

/// The two masked segments of a pair, or `None` for a skipped pair.
pub fn pair_segments(pair: &SegmentPair, question_id: u32, spec: &AdvantageSpec, old_policy: &PolicyTable, opts: PairLossOptions) -> Result<Option<[MaskedSegment; 2]>> {
    if pair.skipped {
        return Ok(None);
    }
    let (rp, rm) = match (pair.reward_plus, pair.reward_minus) {
        (Some(p), Some(m)) => (p, m),
        _ => {
            return Err(EqlenError::InvalidInput(format!(
                "pair {}/{} has unpropagated rewards",
                pair.subgroup_index, pair.pair_index
            )))
        }
    };
    let adv = family_advantages(spec.family, &[rp, rm]);
    let build = |seg: &[TokenId], a: f64| {
        if opts.prefix_in_gradient {
            let prompt = pair.context_tokens[..pair.prompt_len()].to_vec();
            let mut tokens = pair.inherited_prefix().to_vec();
            tokens.extend_from_slice(seg);
            let mut m = MaskedSegment::new(old_policy, question_id, prompt, tokens, a);
            m.prefix_len = pair.inherited_prefix_len;
            m
        } else {
            MaskedSegment::new(old_policy, question_id, pair.context_tokens.clone(), seg.to_vec(), a)
        }
    };
    Ok(Some([build(&pair.seg_plus, adv[0]), build(&pair.seg_minus, adv[1])]))
}

/// Loss of two masked segments sharing one pair: `−(1/2) Σ_s w Σ_t term`.
pub fn loss_masked_pair(segments: &[MaskedSegment; 2], spec: &AdvantageSpec, policy: &PolicyTable, scale: f64) -> LossOutput {
    let mut out = LossOutput::zero(policy.vocab().len());
    let objective = spec.objective();
    for seg in segments {
        let weight = scale * 0.5 * segment_weight(spec, seg.tokens.len());
        accumulate_segment(&mut out, policy, seg, objective, weight);
    }
    out.active = true;
    out
}

/// Per-pair loss; a skipped pair yields exactly zero loss and gradient.
pub fn loss_eqlen_pair(pair: &SegmentPair, question_id: u32, spec: &AdvantageSpec, policy: &PolicyTable, old_policy: &PolicyTable, opts: PairLossOptions) -> Result<LossOutput> {
    Ok(match pair_segments(pair, question_id, spec, old_policy, opts)? {
        None => LossOutput::zero(policy.vocab().len()),
        Some(segs) => loss_masked_pair(&segs, spec, policy, 1.0),
    })
}

/// `(1/K) Σ_k (1/N_k) Σ_i pair_loss(k, i)`, where `K` counts subgroups with
/// at least one counted pair.
pub fn loss_eqlen_total(rollout: &GroupRollout, spec: &AdvantageSpec, policy: &PolicyTable, old_policy: &PolicyTable, opts: PairLossOptions) -> Result<LossOutput> {
    let mut counts: Vec<(usize, usize)> = Vec::new();
    let subgroups: Vec<usize> = if rollout.subgroups.is_empty() {
        let mut ks: Vec<usize> = rollout.pairs.iter().map(|p| p.subgroup_index).collect();
        ks.sort_unstable();
        ks.dedup();
        ks
    } else {
        rollout.subgroups.iter().map(|s| s.index).collect()
    };
    for k in subgroups {
        let n = rollout
            .pairs_in_subgroup(k)
            .filter(|p| opts.skip_counting == SkipCounting::Include || !p.skipped)
            .count();
        if n > 0 {
            counts.push((k, n));
        }
    }
    let mut out = LossOutput::zero(policy.vocab().len());
    if counts.is_empty() {
        return Ok(out);
    }
    let outer = 1.0 / counts.len() as f64;
    for (k, n) in counts {
        let scale = outer * (1.0 / n as f64);
        for pair in rollout.pairs_in_subgroup(k) {
            if let Some(segs) = pair_segments(pair, rollout.question_id, spec, old_policy, opts)? {
                let part = loss_masked_pair(&segs, spec, policy, scale);
                out.loss += part.loss;
                out.grad.add_scaled(&part.grad, 1.0);
                out.prefix_grad.add_scaled(&part.prefix_grad, 1.0);
                out.active = true;
            }
        }
    }
    Ok(out)
}

/// Pair-based loss with leave-one-out advantages `Â± = ±(r⁺ − r⁻)`.
pub fn loss_eqlen_rloo(rollout: &GroupRollout, spec: &AdvantageSpec, policy: &PolicyTable, old_policy: &PolicyTable, opts: PairLossOptions) -> Result<LossOutput> {
    let spec = AdvantageSpec {
        family: AdvantageFamily::Rloo,
        ..*spec
    };
    loss_eqlen_total(rollout, &spec, policy, old_policy, opts)
}

/// Gradient-descent step `θ ← θ − lr · g`.
pub fn sgd_step(policy: &PolicyTable, grad: &GradientVector, lr: f64) -> Result<PolicyTable> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(EqlenError::InvalidInput(format!("learning rate {lr} must be positive and finite")));
    }
    if !grad.is_finite() {
        return Err(EqlenError::Numerical("gradient has non-finite entries".into()));
    }
    let mut next = policy.clone();
    for (ctx, token, g) in grad.entries() {
        if g != 0.0 {
            *next.logit_mut(ctx, token) -= lr * g;
        }
    }
    Ok(next)
}
