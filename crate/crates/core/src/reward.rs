//! Verifiable rewards, retrospective reward propagation over the generation
//! tree, and the skip rule.

use serde::{Deserialize, Serialize};

use crate::error::{EqlenError, Result};
use crate::types::{GenerationTree, GroupRollout, SegmentEnd, SegmentPair, SkipReason, TokenId, TrajectoryEnd};

/// Two real rewards closer than this are treated as a tie.
pub const REWARD_TIE_TOLERANCE: f64 = 1e-12;

/// Per-question verifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VerifierSpec {
    /// 1 iff the token right before EOS is `target`.
    AnswerMatch { target: TokenId },
    /// 1 iff the sum of the non-EOS tokens has parity `target` (0 or 1).
    Parity { target: u32 },
    /// Exact lookup of the generated sequence (EOS included).
    Table {
        entries: Vec<TableEntry>,
        #[serde(default)]
        default: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub tokens: Vec<TokenId>,
    pub reward: f64,
}

impl VerifierSpec {
    pub fn validate(&self) -> Result<()> {
        let in_range = |r: f64| (0.0..=1.0).contains(&r);
        match self {
            VerifierSpec::AnswerMatch { .. } => Ok(()),
            VerifierSpec::Parity { target } if *target > 1 => {
                Err(EqlenError::config("verifier.target", "parity target must be 0 or 1"))
            }
            VerifierSpec::Parity { .. } => Ok(()),
            VerifierSpec::Table { entries, default } => {
                if !in_range(*default) || entries.iter().any(|e| !in_range(e.reward)) {
                    Err(EqlenError::config("verifier.entries", "table rewards must lie in [0, 1]"))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Score one generated trajectory.
///
/// `tokens` are the generated tokens only (no prompt). Trajectories that
/// stopped at the length cap score 0 under every verifier kind.
pub fn score_trajectory(verifier: &VerifierSpec, eos_id: TokenId, tokens: &[TokenId], end: TrajectoryEnd) -> f64 {
    if end == TrajectoryEnd::Truncated || tokens.last() != Some(&eos_id) {
        return 0.0;
    }
    let body = &tokens[..tokens.len() - 1];
    match verifier {
        VerifierSpec::AnswerMatch { target } => match body.last() {
            Some(t) if t == target => 1.0,
            _ => 0.0,
        },
        VerifierSpec::Parity { target } => {
            let sum: u64 = body.iter().map(|&t| u64::from(t)).sum();
            if sum % 2 == u64::from(*target) {
                1.0
            } else {
                0.0
            }
        }
        VerifierSpec::Table { entries, default } => entries
            .iter()
            .find(|e| e.tokens == tokens)
            .map_or(*default, |e| e.reward),
    }
}

/// How the surviving segment's reward aggregates its descendants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Max,
    Mean,
}

/// Which descendants count as extensions of a surviving segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Descent {
    /// Every scored leaf in the subtree.
    #[default]
    Transitive,
    /// Scored leaves that are direct children only.
    OneHop,
}

/// Score every trajectory-ending leaf of the tree.
pub fn score_leaves(tree: &mut GenerationTree, verifier: &VerifierSpec, eos_id: TokenId) {
    let scored: Vec<(usize, f64)> = tree
        .nodes
        .iter()
        .filter(|n| n.end_state.is_scored_leaf())
        .map(|n| {
            let end = if n.end_state == SegmentEnd::Eos {
                TrajectoryEnd::Eos
            } else {
                TrajectoryEnd::Truncated
            };
            (n.id, score_trajectory(verifier, eos_id, &tree.trajectory(n.id), end))
        })
        .collect();
    tree.leaf_rewards.extend(scored);
}

/// Scored leaf ids that extend node `id`.
pub fn extension_leaves(tree: &GenerationTree, id: usize, descent: Descent) -> Vec<usize> {
    let candidates: Vec<usize> = match descent {
        Descent::Transitive => tree.descendants(id),
        Descent::OneHop => tree.children(id).map(|n| n.id).collect(),
    };
    candidates
        .into_iter()
        .filter(|c| tree.node(*c).end_state.is_scored_leaf())
        .collect()
}

/// Fill both rewards of every pair from the scored tree, then apply the
/// skip rule.
pub fn propagate_rewards(tree: &GenerationTree, pairs: &mut [SegmentPair], aggregation: Aggregation, descent: Descent) -> Result<()> {
    let leaf = |id: usize| {
        tree.leaf_rewards
            .get(&id)
            .copied()
            .ok_or_else(|| EqlenError::InvalidInput(format!("leaf node {id} has not been scored")))
    };
    for pair in pairs.iter_mut() {
        pair.reward_plus = Some(leaf(pair.plus_node)?);
        pair.reward_minus = if pair.simultaneous {
            Some(leaf(pair.minus_node)?)
        } else {
            let rewards = extension_leaves(tree, pair.minus_node, descent)
                .into_iter()
                .map(leaf)
                .collect::<Result<Vec<f64>>>()?;
            aggregate(&rewards, aggregation)
        };
        pair.skipped = false;
        pair.skip_reason = None;
        if pair.reward_minus.is_none() {
            pair.skipped = true;
            pair.skip_reason = Some(SkipReason::NoExtension);
        }
    }
    apply_skip_rule(pairs);
    Ok(())
}

fn aggregate(rewards: &[f64], aggregation: Aggregation) -> Option<f64> {
    if rewards.is_empty() {
        return None;
    }
    Some(match aggregation {
        Aggregation::Max => rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Aggregation::Mean => rewards.iter().sum::<f64>() / rewards.len() as f64,
    })
}

/// Mark a pair skipped when its two rewards tie. Pairs already skipped for
/// lack of extensions are left alone.
pub fn apply_skip_rule(pairs: &mut [SegmentPair]) {
    for pair in pairs.iter_mut() {
        if let (Some(p), Some(m)) = (pair.reward_plus, pair.reward_minus) {
            let tie = if p.fract() == 0.0 && m.fract() == 0.0 {
                p == m
            } else {
                (p - m).abs() <= REWARD_TIE_TOLERANCE
            };
            pair.skipped = tie;
            pair.skip_reason = tie.then_some(SkipReason::EqualReward);
        }
    }
}

/// Options for scoring a full rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RewardOptions {
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub descent: Descent,
}

/// Score trajectories (independent rollouts) or leaves and pairs
/// (dual-track rollouts) in place.
pub fn score_rollout(rollout: &mut GroupRollout, verifier: &VerifierSpec, eos_id: TokenId, opts: RewardOptions) -> Result<()> {
    for traj in &mut rollout.trajectories {
        traj.reward = Some(score_trajectory(verifier, eos_id, &traj.tokens, traj.end));
    }
    score_leaves(&mut rollout.tree, verifier, eos_id);
    propagate_rewards(&rollout.tree, &mut rollout.pairs, opts.aggregation, opts.descent)
}
