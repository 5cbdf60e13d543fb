//! Domain types shared by every stage of the pipeline.
//!
//! Everything here is a plain value: cloneable, comparable and
//! serializable to JSON. Maps are `BTreeMap`s so that serialized output and
//! iteration order are stable across runs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{EqlenError, Result};
use crate::reward::VerifierSpec;

/// Token identifier. Valid ids lie in `0..Vocab::size`.
pub type TokenId = u32;

/// Left-padding sentinel used in context windows before any token exists.
pub const BOS: TokenId = u32::MAX;

/// Token alphabet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr")]
pub struct Vocab {
    size: u32,
    eos_id: TokenId,
}

#[derive(Deserialize)]
struct VocabRepr {
    size: u32,
    eos_id: TokenId,
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = EqlenError;

    fn try_from(r: VocabRepr) -> Result<Self> {
        Vocab::new(r.size, r.eos_id)
    }
}

impl Vocab {
    pub fn new(size: u32, eos_id: TokenId) -> Result<Self> {
        if size < 2 {
            return Err(EqlenError::config("vocab.size", "must be at least 2"));
        }
        if eos_id >= size {
            return Err(EqlenError::config(
                "vocab.eos_id",
                format!("{eos_id} is outside 0..{size}"),
            ));
        }
        Ok(Vocab { size, eos_id })
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn len(&self) -> usize {
        self.size as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn contains(&self, token: TokenId) -> bool {
        token < self.size
    }
}

/// Conditioning state of the policy: the question plus the last `k` tokens.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Context {
    pub question_id: u32,
    pub window: Vec<TokenId>,
}

impl Context {
    /// The all-BOS window a question starts from.
    pub fn initial(question_id: u32, order: usize) -> Self {
        Context {
            question_id,
            window: vec![BOS; order],
        }
    }

    /// The window reached after reading `tokens` from the initial state.
    pub fn after(question_id: u32, order: usize, tokens: &[TokenId]) -> Self {
        let mut ctx = Context::initial(question_id, order);
        let skip = tokens.len().saturating_sub(order);
        for &t in &tokens[skip..] {
            ctx.push(t);
        }
        ctx
    }

    /// Shift the window left by one and append `token`.
    pub fn push(&mut self, token: TokenId) {
        if self.window.is_empty() {
            return;
        }
        self.window.rotate_left(1);
        let last = self.window.len() - 1;
        self.window[last] = token;
    }

    pub fn advanced(&self, token: TokenId) -> Self {
        let mut next = self.clone();
        next.push(token);
        next
    }

    pub fn order(&self) -> usize {
        self.window.len()
    }

    pub fn is_valid(&self, vocab: &Vocab, order: usize) -> bool {
        self.window.len() == order && self.window.iter().all(|&t| t == BOS || vocab.contains(t))
    }
}

/// A context-indexed table of logits defining a softmax token policy.
///
/// Contexts absent from the table use `default_logits`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyTableRepr", into = "PolicyTableRepr")]
pub struct PolicyTable {
    vocab: Vocab,
    order: usize,
    logits: BTreeMap<Context, Vec<f64>>,
    default_logits: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PolicyTableRepr {
    vocab: Vocab,
    order: usize,
    default_logits: Vec<f64>,
    rows: Vec<ContextRow>,
}

#[derive(Serialize, Deserialize)]
struct ContextRow {
    context: Context,
    values: Vec<f64>,
}

impl From<PolicyTable> for PolicyTableRepr {
    fn from(p: PolicyTable) -> Self {
        PolicyTableRepr {
            vocab: p.vocab,
            order: p.order,
            default_logits: p.default_logits,
            rows: p
                .logits
                .into_iter()
                .map(|(context, values)| ContextRow { context, values })
                .collect(),
        }
    }
}

impl TryFrom<PolicyTableRepr> for PolicyTable {
    type Error = EqlenError;

    fn try_from(r: PolicyTableRepr) -> Result<Self> {
        let mut table = PolicyTable::new(r.vocab, r.order);
        table.set_default_logits(r.default_logits)?;
        for row in r.rows {
            table.set_logits(row.context, row.values)?;
        }
        Ok(table)
    }
}

fn check_row(vocab: &Vocab, row: &[f64], what: &str) -> Result<()> {
    if row.len() != vocab.len() {
        return Err(EqlenError::InvalidInput(format!(
            "{what} has length {}, expected {}",
            row.len(),
            vocab.len()
        )));
    }
    if let Some(bad) = row.iter().find(|v| !v.is_finite()) {
        return Err(EqlenError::InvalidInput(format!("{what} contains non-finite value {bad}")));
    }
    Ok(())
}

impl PolicyTable {
    /// Uniform policy: no stored rows, all-zero default logits.
    pub fn new(vocab: Vocab, order: usize) -> Self {
        PolicyTable {
            vocab,
            order,
            logits: BTreeMap::new(),
            default_logits: vec![0.0; vocab.len()],
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn default_logits(&self) -> &[f64] {
        &self.default_logits
    }

    pub fn set_default_logits(&mut self, row: Vec<f64>) -> Result<()> {
        check_row(&self.vocab, &row, "default_logits")?;
        self.default_logits = row;
        Ok(())
    }

    pub fn set_logits(&mut self, ctx: Context, row: Vec<f64>) -> Result<()> {
        if !ctx.is_valid(&self.vocab, self.order) {
            return Err(EqlenError::InvalidInput(format!("malformed context {ctx:?}")));
        }
        check_row(&self.vocab, &row, "logit row")?;
        self.logits.insert(ctx, row);
        Ok(())
    }

    /// Logits used at `ctx` (stored row or the default).
    pub fn logits_for(&self, ctx: &Context) -> &[f64] {
        self.logits.get(ctx).map(Vec::as_slice).unwrap_or(&self.default_logits)
    }

    pub fn logit(&self, ctx: &Context, token: TokenId) -> f64 {
        self.logits_for(ctx)[token as usize]
    }

    /// Mutable access to one logit, materializing the context row from the
    /// defaults if needed.
    pub fn logit_mut(&mut self, ctx: &Context, token: TokenId) -> &mut f64 {
        let default = &self.default_logits;
        let row = self
            .logits
            .entry(ctx.clone())
            .or_insert_with(|| default.clone());
        &mut row[token as usize]
    }

    pub fn stored_contexts(&self) -> impl Iterator<Item = &Context> {
        self.logits.keys()
    }

    pub fn stored_rows(&self) -> usize {
        self.logits.len()
    }
}

/// Lifecycle state of a decoding track.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackStatus {
    Active,
    /// Emitted EOS.
    Terminated,
    /// Stopped without EOS (length cap, budget, pair cap, or retired).
    Expired,
}

/// A live decoding lane.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Track {
    /// Lane index within the group (`0..G`).
    pub track_id: u32,
    /// Number of times this lane has been relaunched.
    pub relaunch: u32,
    /// Tokens from global position 1, including the inherited prefix.
    pub tokens: Vec<TokenId>,
    pub inherited_prefix_len: usize,
    pub status: TrackStatus,
    /// Harvest event at which this track was launched, if any.
    pub parent_pair_index: Option<usize>,
}

impl Track {
    pub fn fresh(track_id: u32) -> Self {
        Track {
            track_id,
            relaunch: 0,
            tokens: Vec::new(),
            inherited_prefix_len: 0,
            status: TrackStatus::Active,
            parent_pair_index: None,
        }
    }

    pub fn is_consistent(&self, vocab: &Vocab) -> bool {
        self.inherited_prefix_len <= self.tokens.len()
            && (self.status != TrackStatus::Terminated
                || self.tokens.last() == Some(&vocab.eos_id()))
    }
}

/// Why a pair was excluded from the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    EqualReward,
    /// The surviving segment has no scored descendant trajectory.
    NoExtension,
}

/// One harvested equal-length pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentPair {
    pub pair_index: usize,
    pub subgroup_index: usize,
    /// Question prompt followed by the inherited prefix.
    pub context_tokens: Vec<TokenId>,
    /// How many trailing entries of `context_tokens` are inherited prefix.
    pub inherited_prefix_len: usize,
    /// Segment of the track that reached EOS.
    pub seg_plus: Vec<TokenId>,
    pub seg_minus: Vec<TokenId>,
    pub length: usize,
    pub reward_plus: Option<f64>,
    pub reward_minus: Option<f64>,
    pub skipped: bool,
    pub skip_reason: Option<SkipReason>,
    /// Tree node ids of the two segments.
    pub plus_node: usize,
    pub minus_node: usize,
    /// Both tracks emitted EOS on the harvest step.
    pub simultaneous: bool,
}

impl SegmentPair {
    pub fn prompt_len(&self) -> usize {
        self.context_tokens.len() - self.inherited_prefix_len
    }

    pub fn inherited_prefix(&self) -> &[TokenId] {
        &self.context_tokens[self.prompt_len()..]
    }
}

/// True iff every structural invariant of the pair holds.
pub fn validate_pair(pair: &SegmentPair) -> bool {
    if pair.length == 0 || pair.seg_plus.len() != pair.length || pair.seg_minus.len() != pair.length {
        return false;
    }
    if pair.inherited_prefix_len > pair.context_tokens.len() {
        return false;
    }
    match (pair.reward_plus, pair.reward_minus, pair.skip_reason) {
        (_, None, Some(SkipReason::NoExtension)) => pair.skipped,
        (Some(p), Some(m), reason) => {
            let equal = (p - m).abs() <= crate::reward::REWARD_TIE_TOLERANCE;
            pair.skipped == equal && (reason == Some(SkipReason::EqualReward)) == equal
        }
        (_, _, None) => !pair.skipped,
        _ => false,
    }
}

/// How a tree node's segment ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentEnd {
    /// Continues into child segments.
    Open,
    /// Ends a trajectory with EOS.
    Eos,
    /// Ends a trajectory at the length cap without EOS; scored as-is.
    Truncated,
    /// Decoding stopped by the token budget or pair cap; never scored.
    Cut,
}

impl SegmentEnd {
    /// Whether the trajectory ending here is handed to the verifier.
    pub fn is_scored_leaf(self) -> bool {
        matches!(self, SegmentEnd::Eos | SegmentEnd::Truncated)
    }
}

/// One segment record in the generation tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentNode {
    pub id: usize,
    /// `None` for segments that start at the question.
    pub parent: Option<usize>,
    pub subgroup_index: usize,
    pub track_id: u32,
    pub relaunch: u32,
    /// Global token positions `start..end` (0-based, exclusive end).
    pub start: usize,
    pub end: usize,
    pub tokens: Vec<TokenId>,
    pub end_state: SegmentEnd,
}

/// Ancestry of harvested segments; leaves are complete trajectories.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationTree {
    pub nodes: Vec<SegmentNode>,
    /// Verifier reward per scored leaf node id.
    pub leaf_rewards: BTreeMap<usize, f64>,
}

impl GenerationTree {
    pub fn add(&mut self, mut node: SegmentNode) -> usize {
        let id = self.nodes.len();
        node.id = id;
        self.nodes.push(node);
        id
    }

    pub fn node(&self, id: usize) -> &SegmentNode {
        &self.nodes[id]
    }

    pub fn children(&self, id: usize) -> impl Iterator<Item = &SegmentNode> {
        self.nodes.iter().filter(move |n| n.parent == Some(id))
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.nodes
            .iter()
            .filter_map(|n| n.parent.map(|p| (p, n.id)))
            .collect()
    }

    /// Generated tokens preceding node `id` (concatenated ancestor segments).
    pub fn context_of(&self, id: usize) -> Vec<TokenId> {
        let mut chain = Vec::new();
        let mut cur = self.nodes[id].parent;
        while let Some(p) = cur {
            chain.push(p);
            cur = self.nodes[p].parent;
        }
        chain
            .iter()
            .rev()
            .flat_map(|&p| self.nodes[p].tokens.iter().copied())
            .collect()
    }

    /// Full trajectory ending at node `id`.
    pub fn trajectory(&self, id: usize) -> Vec<TokenId> {
        let mut seq = self.context_of(id);
        seq.extend_from_slice(&self.nodes[id].tokens);
        seq
    }

    /// Ids of every node in the subtree below `id` (excluding `id`).
    pub fn descendants(&self, id: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(cur) = stack.pop() {
            for child in self.children(cur) {
                out.push(child.id);
                stack.push(child.id);
            }
        }
        out.sort_unstable();
        out
    }

    /// Parents precede children, segment positions chain, and each node's
    /// context is its parent's context plus the parent segment.
    pub fn is_well_formed(&self) -> bool {
        self.nodes.iter().enumerate().all(|(i, n)| {
            n.id == i
                && n.end >= n.start
                && n.tokens.len() == n.end - n.start
                && match n.parent {
                    None => n.start == 0,
                    Some(p) => {
                        p < i
                            && self.nodes[p].end == n.start
                            && self.nodes[p].end_state == SegmentEnd::Open
                            && self.nodes[p].subgroup_index == n.subgroup_index
                    }
                }
        })
    }
}

/// Which generation engine produced a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutKind {
    Independent,
    DualTrack,
}

/// How a trajectory ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryEnd {
    Eos,
    Truncated,
}

/// A complete trajectory of the independent sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub track_id: u32,
    pub tokens: Vec<TokenId>,
    pub end: TrajectoryEnd,
    pub reward: Option<f64>,
}

/// Why a dual-track subgroup stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloseReason {
    /// Both current tracks emitted EOS on the same step.
    DualTermination,
    /// Pair cap (or single-pair mode) reached.
    PairCap,
    /// Length cap reached without EOS.
    LengthCap,
    TokenBudget,
}

/// Per-subgroup bookkeeping of a dual-track rollout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgroupRecord {
    pub index: usize,
    pub pairs: usize,
    pub closed_by: CloseReason,
    /// Decoded tokens not belonging to any harvested segment.
    pub trailing_tokens: usize,
    pub tokens_decoded: usize,
    /// Final state of every track that ran in this subgroup.
    pub tracks: Vec<Track>,
}

/// Everything produced for one question under one sampling scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRollout {
    pub question_id: u32,
    pub kind: RolloutKind,
    pub prompt: Vec<TokenId>,
    pub trajectories: Vec<Trajectory>,
    pub pairs: Vec<SegmentPair>,
    pub subgroups: Vec<SubgroupRecord>,
    pub tree: GenerationTree,
    pub token_budget_used: usize,
}

impl GroupRollout {
    pub fn pairs_in_subgroup(&self, k: usize) -> impl Iterator<Item = &SegmentPair> {
        self.pairs.iter().filter(move |p| p.subgroup_index == k)
    }

    /// Exactly one of trajectories/pairs is populated, matching the kind.
    /// A dual-track rollout whose budget expired before any harvest has
    /// neither.
    pub fn family_consistent(&self) -> bool {
        match self.kind {
            RolloutKind::Independent => !self.trajectories.is_empty() && self.pairs.is_empty(),
            RolloutKind::DualTrack => self.trajectories.is_empty(),
        }
    }
}

/// A question with its verifier target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: u32,
    #[serde(default)]
    pub prompt: Vec<TokenId>,
    pub verifier: VerifierSpec,
}

/// Sparse gradient over policy logits, indexed like [`PolicyTable`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "GradientRepr", try_from = "GradientRepr")]
pub struct GradientVector {
    vocab_size: usize,
    rows: BTreeMap<Context, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct GradientRepr {
    vocab_size: usize,
    rows: Vec<ContextRow>,
}

impl From<GradientVector> for GradientRepr {
    fn from(g: GradientVector) -> Self {
        GradientRepr {
            vocab_size: g.vocab_size,
            rows: g
                .rows
                .into_iter()
                .map(|(context, values)| ContextRow { context, values })
                .collect(),
        }
    }
}

impl TryFrom<GradientRepr> for GradientVector {
    type Error = EqlenError;

    fn try_from(r: GradientRepr) -> Result<Self> {
        let mut g = GradientVector::zeros(r.vocab_size);
        for row in r.rows {
            if row.values.len() != r.vocab_size || row.values.iter().any(|v| !v.is_finite()) {
                return Err(EqlenError::InvalidInput(format!(
                    "gradient row at {:?} is malformed",
                    row.context
                )));
            }
            g.rows.insert(row.context, row.values);
        }
        Ok(g)
    }
}

impl GradientVector {
    pub fn zeros(vocab_size: usize) -> Self {
        GradientVector {
            vocab_size,
            rows: BTreeMap::new(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn row_mut(&mut self, ctx: &Context) -> &mut Vec<f64> {
        let n = self.vocab_size;
        self.rows.entry(ctx.clone()).or_insert_with(|| vec![0.0; n])
    }

    pub fn row(&self, ctx: &Context) -> Option<&[f64]> {
        self.rows.get(ctx).map(Vec::as_slice)
    }

    pub fn rows(&self) -> impl Iterator<Item = (&Context, &[f64])> {
        self.rows.iter().map(|(c, v)| (c, v.as_slice()))
    }

    pub fn get(&self, ctx: &Context, token: TokenId) -> f64 {
        self.rows.get(ctx).map_or(0.0, |r| r[token as usize])
    }

    pub fn set(&mut self, ctx: &Context, token: TokenId, value: f64) {
        self.row_mut(ctx)[token as usize] = value;
    }

    /// Iterate `(context, token, value)` over materialized coordinates.
    pub fn entries(&self) -> impl Iterator<Item = (&Context, TokenId, f64)> {
        self.rows
            .iter()
            .flat_map(|(c, r)| r.iter().enumerate().map(move |(t, &v)| (c, t as TokenId, v)))
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &GradientVector, alpha: f64) {
        for (ctx, row) in &other.rows {
            let dst = self.row_mut(ctx);
            for (d, s) in dst.iter_mut().zip(row) {
                *d += alpha * s;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for row in self.rows.values_mut() {
            for v in row.iter_mut() {
                *v *= alpha;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.rows
            .values()
            .flat_map(|r| r.iter())
            .fold(0.0, |acc, v| acc + v * v)
            .sqrt()
    }

    /// Euclidean norm over the rows of the given contexts only.
    pub fn norm_restricted<'a>(&self, contexts: impl IntoIterator<Item = &'a Context>) -> f64 {
        let mut seen = std::collections::BTreeSet::new();
        let mut acc = 0.0;
        for c in contexts {
            if seen.insert(c) {
                if let Some(r) = self.rows.get(c) {
                    acc = r.iter().fold(acc, |a, v| a + v * v);
                }
            }
        }
        acc.sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.rows
            .values()
            .flat_map(|r| r.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// True when every materialized coordinate is exactly zero.
    pub fn is_zero(&self) -> bool {
        self.rows.values().flat_map(|r| r.iter()).all(|&v| v == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.rows.values().flat_map(|r| r.iter()).all(|v| v.is_finite())
    }

    /// Coordinatewise comparison treating missing rows as zero.
    pub fn max_abs_diff(&self, other: &GradientVector) -> f64 {
        let mut worst = 0.0_f64;
        for (c, t, v) in self.entries() {
            worst = worst.max((v - other.get(c, t)).abs());
        }
        for (c, t, v) in other.entries() {
            worst = worst.max((v - self.get(c, t)).abs());
        }
        worst
    }

    /// Bitwise equality treating missing rows as zero rows.
    pub fn bitwise_eq(&self, other: &GradientVector) -> bool {
        let same = |a: &GradientVector, b: &GradientVector| {
            a.entries()
                .all(|(c, t, v)| v.to_bits() == b.get(c, t).to_bits() || (v == 0.0 && b.get(c, t) == 0.0))
        };
        same(self, other) && same(other, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(plus: usize, minus: usize, length: usize) -> SegmentPair {
        SegmentPair {
            pair_index: 0,
            subgroup_index: 0,
            context_tokens: vec![],
            inherited_prefix_len: 0,
            seg_plus: vec![1; plus],
            seg_minus: vec![2; minus],
            length,
            reward_plus: None,
            reward_minus: None,
            skipped: false,
            skip_reason: None,
            plus_node: 0,
            minus_node: 1,
            simultaneous: false,
        }
    }

    #[test]
    fn validate_pair_examples() {
        assert!(validate_pair(&pair(7, 7, 7)));
        assert!(!validate_pair(&pair(7, 5, 7)));
        assert!(!validate_pair(&pair(0, 0, 0)));
    }

    #[test]
    fn validate_pair_checks_skip_flag() {
        let mut p = pair(3, 3, 3);
        p.reward_plus = Some(1.0);
        p.reward_minus = Some(1.0);
        assert!(!validate_pair(&p));
        p.skipped = true;
        p.skip_reason = Some(SkipReason::EqualReward);
        assert!(validate_pair(&p));
        p.reward_minus = Some(0.0);
        assert!(!validate_pair(&p));
        p.reward_minus = None;
        p.skip_reason = Some(SkipReason::NoExtension);
        assert!(validate_pair(&p));
    }

    #[test]
    fn vocab_rejects_bad_eos() {
        assert!(Vocab::new(1, 0).is_err());
        assert!(Vocab::new(4, 4).is_err());
        assert!(Vocab::new(4, 3).is_ok());
        assert!(serde_json::from_str::<Vocab>(r#"{"size":3,"eos_id":9}"#).is_err());
    }

    #[test]
    fn context_window_shifts() {
        let c = Context::after(3, 2, &[5, 6, 7]);
        assert_eq!(c.window, vec![6, 7]);
        let c = Context::after(3, 2, &[5]);
        assert_eq!(c.window, vec![BOS, 5]);
        assert_eq!(c.advanced(9).window, vec![5, 9]);
        let z = Context::after(1, 0, &[1, 2]);
        assert!(z.window.is_empty());
    }

    #[test]
    fn policy_rejects_non_finite_rows() {
        let v = Vocab::new(3, 2).unwrap();
        let mut p = PolicyTable::new(v, 1);
        assert!(p.set_logits(Context::initial(0, 1), vec![0.0, f64::NAN, 0.0]).is_err());
        assert!(p.set_logits(Context::initial(0, 1), vec![0.0, 0.0]).is_err());
        assert!(p.set_logits(Context::initial(0, 2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn tree_context_chains_segments() {
        let mut tree = GenerationTree::default();
        let mk = |parent, start, tokens: Vec<TokenId>, end_state| SegmentNode {
            id: 0,
            parent,
            subgroup_index: 0,
            track_id: 0,
            relaunch: 0,
            start,
            end: start + tokens.len(),
            tokens,
            end_state,
        };
        let a = tree.add(mk(None, 0, vec![1, 2], SegmentEnd::Open));
        let b = tree.add(mk(Some(a), 2, vec![3], SegmentEnd::Open));
        let c = tree.add(mk(Some(b), 3, vec![4, 0], SegmentEnd::Eos));
        assert!(tree.is_well_formed());
        assert_eq!(tree.context_of(c), vec![1, 2, 3]);
        assert_eq!(tree.trajectory(c), vec![1, 2, 3, 4, 0]);
        assert_eq!(tree.descendants(a), vec![b, c]);
        assert_eq!(tree.edges(), vec![(a, b), (b, c)]);
    }
}
