//! Generation engines.
//!
//! [`rollout_independent`] samples `G` trajectories from the question, the
//! usual group-relative baseline. [`rollout_dualtrack`] splits the group into
//! lane pairs that decode in lockstep; every time a lane emits EOS the two
//! segments since the previous harvest point form an equal-length pair, the
//! finished lane is retired, and a fresh lane inherits the survivor's tokens
//! as its prefix.

use serde::{Deserialize, Serialize};

use crate::error::{EqlenError, Result};
use crate::optim::grpo_advantages;
use crate::policy::sample_token;
use crate::rng::{RngStream, StreamKey};
use crate::types::{
    validate_pair, CloseReason, Context, GenerationTree, GroupRollout, PolicyTable, Question, RolloutKind, SegmentEnd,
    SegmentNode, SegmentPair, SubgroupRecord, TokenId, Track, TrackStatus, Trajectory, TrajectoryEnd, Vocab,
};

/// Source of next tokens for the engines.
pub trait TokenSampler {
    fn vocab(&self) -> Vocab;
    fn order(&self) -> usize;
    /// Draw the token at global `position` (1-based) of a track on `lane`.
    fn sample(&self, ctx: &Context, lane: u32, position: usize, rng: &mut RngStream) -> TokenId;
}

impl TokenSampler for PolicyTable {
    fn vocab(&self) -> Vocab {
        *PolicyTable::vocab(self)
    }

    fn order(&self) -> usize {
        PolicyTable::order(self)
    }

    fn sample(&self, ctx: &Context, _lane: u32, _position: usize, rng: &mut RngStream) -> TokenId {
        sample_token(self, ctx, rng)
    }
}

/// Stub sampler that emits EOS at scripted global positions per lane.
///
/// A relaunched track keeps its lane's script. Other positions get a
/// non-EOS filler token (`filler`, or a random non-EOS id when unset).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedSampler {
    pub vocab: Vocab,
    #[serde(default = "default_order")]
    pub order: usize,
    pub eos_steps: Vec<Vec<usize>>,
    #[serde(default)]
    pub filler: Option<TokenId>,
}

fn default_order() -> usize {
    2
}

impl ScriptedSampler {
    pub fn new(vocab: Vocab, eos_steps: Vec<Vec<usize>>) -> Self {
        ScriptedSampler {
            vocab,
            order: 2,
            eos_steps,
            filler: None,
        }
    }
}

impl TokenSampler for ScriptedSampler {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn order(&self) -> usize {
        self.order
    }

    fn sample(&self, _ctx: &Context, lane: u32, position: usize, rng: &mut RngStream) -> TokenId {
        let eos = self.vocab.eos_id();
        if self
            .eos_steps
            .get(lane as usize)
            .is_some_and(|steps| steps.contains(&position))
        {
            return eos;
        }
        if let Some(f) = self.filler {
            return f;
        }
        let t = (rng.next_u64() % u64::from(self.vocab.size() - 1)) as TokenId;
        if t >= eos {
            t + 1
        } else {
            t
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    #[default]
    Multi,
    /// Close each subgroup after its first harvest.
    Single,
}

/// What happens to the surviving lane at a harvest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelaunchMode {
    /// The survivor keeps decoding; one fresh lane inherits its prefix.
    #[default]
    KeepSurvivor,
    /// The survivor is retired and two fresh lanes inherit its prefix.
    FreshBoth,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub group_size: usize,
    pub max_len: usize,
    #[serde(default = "default_max_pairs")]
    pub max_pairs_per_subgroup: usize,
    #[serde(default)]
    pub pair_mode: PairMode,
    /// Decoded-token cap for the whole group; defaults to `G * max_len`.
    #[serde(default)]
    pub token_budget: Option<usize>,
    #[serde(default)]
    pub relaunch: RelaunchMode,
}

fn default_max_pairs() -> usize {
    8
}

impl RolloutConfig {
    pub fn new(group_size: usize, max_len: usize) -> Self {
        RolloutConfig {
            group_size,
            max_len,
            max_pairs_per_subgroup: default_max_pairs(),
            pair_mode: PairMode::Multi,
            token_budget: None,
            relaunch: RelaunchMode::KeepSurvivor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 || self.group_size % 2 != 0 {
            return Err(EqlenError::config(
                "group_size",
                format!("{} must be an even integer >= 2", self.group_size),
            ));
        }
        if self.max_len == 0 {
            return Err(EqlenError::config("max_len", "must be positive"));
        }
        if self.max_pairs_per_subgroup == 0 {
            return Err(EqlenError::config("max_pairs_per_subgroup", "must be at least 1"));
        }
        Ok(())
    }

    pub fn budget(&self) -> usize {
        self.token_budget.unwrap_or(self.group_size * self.max_len)
    }

    pub fn subgroups(&self) -> usize {
        self.group_size / 2
    }
}

/// Sample `group_size` trajectories independently, each until EOS or
/// `max_len` tokens.
pub fn rollout_independent<S: TokenSampler>(sampler: &S, question: &Question, group_size: usize, max_len: usize, seed: u64) -> GroupRollout {
    let eos = sampler.vocab().eos_id();
    let order = sampler.order();
    let mut trajectories = Vec::with_capacity(group_size);
    let mut used = 0;
    for lane in 0..group_size as u32 {
        let mut rng = RngStream::new(seed, StreamKey::new(question.id, lane, 0));
        let mut ctx = Context::after(question.id, order, &question.prompt);
        let mut tokens = Vec::new();
        let mut end = TrajectoryEnd::Truncated;
        while tokens.len() < max_len {
            let t = sampler.sample(&ctx, lane, tokens.len() + 1, &mut rng);
            tokens.push(t);
            ctx.push(t);
            if t == eos {
                end = TrajectoryEnd::Eos;
                break;
            }
        }
        used += tokens.len();
        trajectories.push(Trajectory {
            track_id: lane,
            tokens,
            end,
            reward: None,
        });
    }
    GroupRollout {
        question_id: question.id,
        kind: RolloutKind::Independent,
        prompt: question.prompt.clone(),
        trajectories,
        pairs: Vec::new(),
        subgroups: Vec::new(),
        tree: GenerationTree::default(),
        token_budget_used: used,
    }
}

/// A decoding lane with its stream and running context.
struct Lane {
    track: Track,
    rng: RngStream,
    ctx: Context,
}

impl Lane {
    fn launch(seed: u64, question: &Question, order: usize, track: Track) -> Self {
        let rng = RngStream::new(seed, StreamKey::new(question.id, track.track_id, track.relaunch));
        let mut history = question.prompt.clone();
        history.extend_from_slice(&track.tokens);
        Lane {
            ctx: Context::after(question.id, order, &history),
            rng,
            track,
        }
    }

    fn step<S: TokenSampler>(&mut self, sampler: &S) -> TokenId {
        let pos = self.track.tokens.len() + 1;
        let t = sampler.sample(&self.ctx, self.track.track_id, pos, &mut self.rng);
        self.track.tokens.push(t);
        self.ctx.push(t);
        t
    }
}

struct SubgroupRun<'a, S: TokenSampler> {
    sampler: &'a S,
    question: &'a Question,
    config: &'a RolloutConfig,
    seed: u64,
    index: usize,
    tree: &'a mut GenerationTree,
    pairs: &'a mut Vec<SegmentPair>,
}

impl<S: TokenSampler> SubgroupRun<'_, S> {
    fn run(self, budget: usize) -> SubgroupRecord {
        let SubgroupRun {
            sampler,
            question,
            config,
            seed,
            index,
            tree,
            pairs,
        } = self;
        let eos = sampler.vocab().eos_id();
        let order = sampler.order();
        let lane_ids = [2 * index as u32, 2 * index as u32 + 1];
        let mut lanes: Vec<Lane> = lane_ids
            .iter()
            .map(|&id| Lane::launch(seed, question, order, Track::fresh(id)))
            .collect();
        let mut finished: Vec<Track> = Vec::new();
        // Last harvest position and the surviving segment's node.
        let mut harvest_at = 0usize;
        let mut parent: Option<usize> = None;
        let mut position = 0usize;
        let mut decoded = 0usize;
        let mut harvested = 0usize;
        let mut trailing = 0usize;

        let node = |lane: &Lane, parent: Option<usize>, from: usize, to: usize, end_state: SegmentEnd| SegmentNode {
            id: 0,
            parent,
            subgroup_index: index,
            track_id: lane.track.track_id,
            relaunch: lane.track.relaunch,
            start: from,
            end: to,
            tokens: lane.track.tokens[from..to].to_vec(),
            end_state,
        };

        let closed_by = loop {
            if position >= config.max_len || decoded + lanes.len() > budget {
                let (reason, end_state) = if position >= config.max_len {
                    (CloseReason::LengthCap, SegmentEnd::Truncated)
                } else {
                    (CloseReason::TokenBudget, SegmentEnd::Cut)
                };
                for mut lane in lanes.drain(..) {
                    let tail = lane.track.tokens.len() - harvest_at;
                    trailing += tail;
                    if tail > 0 || end_state == SegmentEnd::Truncated {
                        tree.add(node(&lane, parent, harvest_at, position, end_state));
                    }
                    lane.track.status = TrackStatus::Expired;
                    finished.push(lane.track);
                }
                break reason;
            }

            position += 1;
            let mut emitted = [false; 2];
            for (flag, lane) in emitted.iter_mut().zip(lanes.iter_mut()) {
                *flag = lane.step(sampler) == eos;
            }
            decoded += lanes.len();
            if !emitted[0] && !emitted[1] {
                continue;
            }

            // Harvest. Ties go to the lower lane id, which is lane slot 0.
            let simultaneous = emitted[0] && emitted[1];
            let plus = if emitted[0] { 0 } else { 1 };
            let minus = 1 - plus;
            let plus_node = tree.add(node(&lanes[plus], parent, harvest_at, position, SegmentEnd::Eos));
            let minus_end = if simultaneous { SegmentEnd::Eos } else { SegmentEnd::Open };
            let minus_node = tree.add(node(&lanes[minus], parent, harvest_at, position, minus_end));
            let mut context_tokens = question.prompt.clone();
            context_tokens.extend_from_slice(&lanes[minus].track.tokens[..harvest_at]);
            pairs.push(SegmentPair {
                pair_index: harvested,
                subgroup_index: index,
                context_tokens,
                inherited_prefix_len: harvest_at,
                seg_plus: lanes[plus].track.tokens[harvest_at..position].to_vec(),
                seg_minus: lanes[minus].track.tokens[harvest_at..position].to_vec(),
                length: position - harvest_at,
                reward_plus: None,
                reward_minus: None,
                skipped: false,
                skip_reason: None,
                plus_node,
                minus_node,
                simultaneous,
            });
            harvested += 1;

            if simultaneous {
                for mut lane in lanes.drain(..) {
                    lane.track.status = TrackStatus::Terminated;
                    finished.push(lane.track);
                }
                break CloseReason::DualTermination;
            }

            let mut survivor = lanes.remove(minus);
            let mut done = lanes.remove(0);
            done.track.status = TrackStatus::Terminated;
            finished.push(done.track);
            if harvested >= config.max_pairs_per_subgroup || config.pair_mode == PairMode::Single {
                survivor.track.status = TrackStatus::Expired;
                finished.push(survivor.track);
                break CloseReason::PairCap;
            }

            harvest_at = position;
            parent = Some(minus_node);
            let pair_index = harvested - 1;
            let relaunch = |lane_id: u32, finished: &[Track], source: &Track| {
                let relaunches = finished.iter().filter(|t| t.track_id == lane_id).count() as u32;
                Track {
                    track_id: lane_id,
                    relaunch: relaunches,
                    tokens: source.tokens.clone(),
                    inherited_prefix_len: source.tokens.len(),
                    status: TrackStatus::Active,
                    parent_pair_index: Some(pair_index),
                }
            };
            let plus_lane = lane_ids[plus];
            match config.relaunch {
                RelaunchMode::KeepSurvivor => {
                    let fresh = relaunch(plus_lane, &finished, &survivor.track);
                    let fresh = Lane::launch(seed, question, order, fresh);
                    lanes = if plus == 0 { vec![fresh, survivor] } else { vec![survivor, fresh] };
                }
                RelaunchMode::FreshBoth => {
                    let source = survivor.track.clone();
                    survivor.track.status = TrackStatus::Expired;
                    finished.push(survivor.track);
                    lanes = lane_ids
                        .iter()
                        .map(|&id| Lane::launch(seed, question, order, relaunch(id, &finished, &source)))
                        .collect();
                }
            }
        };

        SubgroupRecord {
            index,
            pairs: harvested,
            closed_by,
            trailing_tokens: trailing,
            tokens_decoded: decoded,
            tracks: finished,
        }
    }
}

/// Dual-track rollout with equal-length pair harvesting and prefix
/// inheritance.
pub fn rollout_dualtrack<S: TokenSampler>(sampler: &S, question: &Question, config: &RolloutConfig, seed: u64) -> Result<GroupRollout> {
    config.validate()?;
    let per_subgroup = config.budget() / config.subgroups();
    let mut tree = GenerationTree::default();
    let mut pairs = Vec::new();
    let mut subgroups = Vec::with_capacity(config.subgroups());
    for index in 0..config.subgroups() {
        let run = SubgroupRun {
            sampler,
            question,
            config,
            seed,
            index,
            tree: &mut tree,
            pairs: &mut pairs,
        };
        subgroups.push(run.run(per_subgroup));
    }
    let rollout = GroupRollout {
        question_id: question.id,
        kind: RolloutKind::DualTrack,
        prompt: question.prompt.clone(),
        trajectories: Vec::new(),
        token_budget_used: subgroups.iter().map(|s| s.tokens_decoded).sum(),
        pairs,
        subgroups,
        tree,
    };
    check_dualtrack(&rollout, &sampler.vocab())?;
    Ok(rollout)
}

/// Structural checks every dual-track rollout must pass.
pub fn check_dualtrack(rollout: &GroupRollout, vocab: &Vocab) -> Result<()> {
    let fail = |msg: String| Err(EqlenError::Numerical(format!("rollout invariant violated: {msg}")));
    if let Some(p) = rollout.pairs.iter().find(|p| !validate_pair(p)) {
        return fail(format!("pair {}/{} fails validation", p.subgroup_index, p.pair_index));
    }
    if !rollout.tree.is_well_formed() {
        return fail("generation tree is malformed".into());
    }
    for sg in &rollout.subgroups {
        let pairs: Vec<&SegmentPair> = rollout.pairs_in_subgroup(sg.index).collect();
        if pairs.len() != sg.pairs {
            return fail(format!("subgroup {} pair count mismatch", sg.index));
        }
        for w in pairs.windows(2) {
            let mut expect = w[0].context_tokens.clone();
            expect.extend_from_slice(&w[0].seg_minus);
            if w[1].context_tokens != expect {
                return fail(format!("subgroup {} breaks prefix concatenation", sg.index));
            }
        }
        if let Some(t) = sg.tracks.iter().find(|t| !t.is_consistent(vocab)) {
            return fail(format!("track {}/{} is inconsistent", t.track_id, t.relaunch));
        }
    }
    Ok(())
}

/// Decoded tokens that belong to no harvested segment.
pub fn trailing_tokens(rollout: &GroupRollout) -> usize {
    rollout.subgroups.iter().map(|s| s.trailing_tokens).sum()
}

/// Members that receive a nonzero gradient: two per non-skipped pair, or
/// the trajectories with nonzero group advantage.
pub fn effective_sample_count(rollout: &GroupRollout) -> usize {
    match rollout.kind {
        RolloutKind::DualTrack => 2 * rollout.pairs.iter().filter(|p| !p.skipped).count(),
        RolloutKind::Independent => {
            let rewards: Vec<f64> = rollout.trajectories.iter().map(|t| t.reward.unwrap_or(0.0)).collect();
            if rewards.len() < 2 {
                return 0;
            }
            grpo_advantages(&rewards)
                .advantages
                .iter()
                .filter(|a| **a != 0.0)
                .count()
        }
    }
}
