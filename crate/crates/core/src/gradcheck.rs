//! Analytic-versus-finite-difference checks for every loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EqlenError, Result};
use crate::optim::{loss_eqlen_pair, loss_eqlen_rloo, loss_eqlen_total, loss_grpo, AdvantageFamily, AdvantageSpec, LossOutput, PairLossOptions};
use crate::policy::{coordinates, fd_gradient};
use crate::reward::{propagate_rewards, Aggregation, Descent, VerifierSpec};
use crate::rng::derive_seed;
use crate::rollout::{rollout_dualtrack, rollout_independent, RolloutConfig};
use crate::types::{Context, GradientVector, GroupRollout, PolicyTable, Question, TokenId, Vocab, BOS};

/// Which loss a case exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossCase {
    Grpo,
    DrGrpo,
    Rloo,
    EqlenPair,
    EqlenTotal,
    EqlenTotalDrGrpo,
    EqlenRloo,
}

impl LossCase {
    pub const ALL: [LossCase; 7] = [
        LossCase::Grpo,
        LossCase::DrGrpo,
        LossCase::Rloo,
        LossCase::EqlenPair,
        LossCase::EqlenTotal,
        LossCase::EqlenTotalDrGrpo,
        LossCase::EqlenRloo,
    ];

    fn family(self) -> AdvantageFamily {
        match self {
            LossCase::Grpo | LossCase::EqlenPair | LossCase::EqlenTotal => AdvantageFamily::GrpoNorm,
            LossCase::DrGrpo | LossCase::EqlenTotalDrGrpo => AdvantageFamily::DrGrpo,
            LossCase::Rloo | LossCase::EqlenRloo => AdvantageFamily::Rloo,
        }
    }

    fn is_pair_based(self) -> bool {
        !matches!(self, LossCase::Grpo | LossCase::DrGrpo | LossCase::Rloo)
    }

    pub fn name(self) -> &'static str {
        match self {
            LossCase::Grpo => "grpo",
            LossCase::DrGrpo => "dr_grpo",
            LossCase::Rloo => "rloo",
            LossCase::EqlenPair => "eqlen_pair",
            LossCase::EqlenTotal => "eqlen_total",
            LossCase::EqlenTotalDrGrpo => "eqlen_total_dr_grpo",
            LossCase::EqlenRloo => "eqlen_rloo",
        }
    }
}

/// Deliberate defects used to confirm the harness catches bugs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Negate the analytic gradient of the per-pair loss.
    SignFlipEqlenPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub schema_version: u32,
    /// Informative (nonzero-gradient) instances per case.
    pub instances: usize,
    pub seed: u64,
    pub fd_step: f64,
    pub epsilon_clip: Option<f64>,
    /// Relative tolerance with clipping enabled.
    pub tolerance: f64,
    /// Relative tolerance with clipping disabled.
    pub tolerance_unclipped: f64,
    /// Spread of `log π_old − log π` per logit.
    pub old_policy_noise: f64,
    pub cases: Vec<LossCase>,
    pub fault: Option<Fault>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            schema_version: crate::config::SCHEMA_VERSION,
            instances: 50,
            seed: 0,
            fd_step: 1e-5,
            epsilon_clip: Some(0.2),
            tolerance: 1e-6,
            tolerance_unclipped: 1e-7,
            old_policy_noise: 0.05,
            cases: LossCase::ALL.to_vec(),
            fault: None,
        }
    }
}

impl GradcheckConfig {
    pub fn active_tolerance(&self) -> f64 {
        if self.epsilon_clip.is_none() {
            self.tolerance_unclipped
        } else {
            self.tolerance
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(EqlenError::config("instances", "must be positive"));
        }
        if !(self.fd_step > 0.0) {
            return Err(EqlenError::config("fd_step", "must be positive"));
        }
        if !(self.tolerance > 0.0) || !(self.tolerance_unclipped > 0.0) {
            return Err(EqlenError::config("tolerance", "must be positive"));
        }
        if self.cases.is_empty() {
            return Err(EqlenError::config("cases", "must not be empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCoordinate {
    pub context: Context,
    pub token: TokenId,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case: LossCase,
    pub instances: usize,
    /// Generated instances discarded for a vanishing gradient or a ratio
    /// sitting on a clip boundary.
    pub discarded: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub worst: Option<WorstCoordinate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub cases: Vec<CaseReport>,
    pub passed: bool,
}

/// Random instance material shared by all cases.
struct Instance {
    policy: PolicyTable,
    old: PolicyTable,
    rollout: GroupRollout,
    contexts: Vec<Context>,
}

const VOCAB: u32 = 5;
const ORDER: usize = 2;
const MAX_LEN: usize = 6;

fn all_contexts(question_id: u32) -> Vec<Context> {
    let symbols: Vec<TokenId> = std::iter::once(BOS).chain(0..VOCAB).collect();
    let mut out = Vec::new();
    for &a in &symbols {
        for &b in &symbols {
            // BOS only ever pads on the left.
            if a != BOS && b == BOS {
                continue;
            }
            out.push(Context {
                question_id,
                window: vec![a, b],
            });
        }
    }
    out
}

fn random_policy(rng: &mut ChaCha8Rng, contexts: &[Context]) -> PolicyTable {
    let vocab = Vocab::new(VOCAB, VOCAB - 1).expect("static vocab");
    let mut p = PolicyTable::new(vocab, ORDER);
    for ctx in contexts {
        let row: Vec<f64> = (0..VOCAB).map(|_| rng.gen_range(-1.5..1.5)).collect();
        p.set_logits(ctx.clone(), row).expect("finite row");
    }
    p
}

fn perturbed(rng: &mut ChaCha8Rng, policy: &PolicyTable, contexts: &[Context], noise: f64) -> PolicyTable {
    let mut old = policy.clone();
    if noise > 0.0 {
        for ctx in contexts {
            let row: Vec<f64> = policy.logits_for(ctx).iter().map(|x| x + rng.gen_range(-noise..noise)).collect();
            old.set_logits(ctx.clone(), row).expect("finite row");
        }
    }
    old
}

fn random_reward(rng: &mut ChaCha8Rng, binary: bool) -> f64 {
    if binary {
        f64::from(rng.gen_range(0..2u8))
    } else {
        rng.gen_range(0.0..1.0)
    }
}

fn make_instance(cfg: &GradcheckConfig, case: LossCase, index: u64) -> Result<Instance> {
    let seed = derive_seed(cfg.seed, &[case as u64, index]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let contexts = all_contexts(0);
    let policy = random_policy(&mut rng, &contexts);
    let old = perturbed(&mut rng, &policy, &contexts, cfg.old_policy_noise);
    let question = Question {
        id: 0,
        prompt: Vec::new(),
        verifier: VerifierSpec::AnswerMatch { target: 0 },
    };
    let binary = rng.gen_bool(0.5);
    let rollout = if case.is_pair_based() {
        let rc = RolloutConfig {
            max_pairs_per_subgroup: 4,
            ..RolloutConfig::new(4, MAX_LEN)
        };
        let mut r = rollout_dualtrack(&policy, &question, &rc, seed)?;
        let leaves: Vec<usize> = r.tree.nodes.iter().filter(|n| n.end_state.is_scored_leaf()).map(|n| n.id).collect();
        for id in leaves {
            r.tree.leaf_rewards.insert(id, random_reward(&mut rng, binary));
        }
        propagate_rewards(&r.tree, &mut r.pairs, Aggregation::Max, Descent::Transitive)?;
        r
    } else {
        let mut r = rollout_independent(&policy, &question, 4, MAX_LEN, seed);
        for t in &mut r.trajectories {
            t.reward = Some(random_reward(&mut rng, binary));
        }
        r
    };
    Ok(Instance {
        policy,
        old,
        rollout,
        contexts,
    })
}

fn evaluate(case: LossCase, spec: &AdvantageSpec, inst: &Instance, policy: &PolicyTable) -> Result<LossOutput> {
    let opts = PairLossOptions::default();
    let r = &inst.rollout;
    match case {
        LossCase::Grpo | LossCase::DrGrpo | LossCase::Rloo => loss_grpo(r, spec, policy, &inst.old),
        LossCase::EqlenPair => match r.pairs.iter().find(|p| !p.skipped) {
            Some(pair) => loss_eqlen_pair(pair, r.question_id, spec, policy, &inst.old, opts),
            None => Ok(LossOutput::zero(policy.vocab().len())),
        },
        LossCase::EqlenTotal | LossCase::EqlenTotalDrGrpo => loss_eqlen_total(r, spec, policy, &inst.old, opts),
        LossCase::EqlenRloo => loss_eqlen_rloo(r, spec, policy, &inst.old, opts),
    }
}

/// Every `(log π − log π_old)` ratio of the instance, for kink detection.
fn ratios(inst: &Instance) -> Vec<f64> {
    use crate::policy::token_log_probs;
    let q = inst.rollout.question_id;
    let mut out = Vec::new();
    let mut push = |ctx: &[TokenId], seg: &[TokenId]| {
        let now = token_log_probs(&inst.policy, q, ctx, seg);
        let old = token_log_probs(&inst.old, q, ctx, seg);
        out.extend(now.iter().zip(&old).map(|(a, b)| (a - b).exp()));
    };
    for t in &inst.rollout.trajectories {
        push(&inst.rollout.prompt, &t.tokens);
    }
    for p in &inst.rollout.pairs {
        push(&p.context_tokens, &p.seg_plus);
        push(&p.context_tokens, &p.seg_minus);
    }
    out
}

fn near_kink(inst: &Instance, epsilon: Option<f64>) -> bool {
    match epsilon {
        None => false,
        Some(e) => ratios(inst)
            .iter()
            .any(|r| (r - (1.0 - e)).abs() < 1e-3 || (r - (1.0 + e)).abs() < 1e-3),
    }
}

/// Largest coordinate error relative to the largest numeric entry.
pub fn relative_error(analytic: &GradientVector, numeric: &GradientVector) -> (f64, Option<WorstCoordinate>) {
    let scale = numeric.max_abs().max(analytic.max_abs()).max(1e-12);
    let mut worst: Option<WorstCoordinate> = None;
    let mut max_err = 0.0;
    let mut keys: Vec<(Context, TokenId)> = numeric.entries().map(|(c, t, _)| (c.clone(), t)).collect();
    keys.extend(analytic.entries().map(|(c, t, _)| (c.clone(), t)));
    keys.sort();
    keys.dedup();
    for (ctx, tok) in keys {
        let (a, n) = (analytic.get(&ctx, tok), numeric.get(&ctx, tok));
        let err = (a - n).abs() / scale;
        if err > max_err || worst.is_none() {
            max_err = err;
            worst = Some(WorstCoordinate {
                context: ctx,
                token: tok,
                analytic: a,
                numeric: n,
            });
        }
    }
    (max_err, worst)
}

/// Minimum gradient magnitude for an instance to count.
const INFORMATIVE: f64 = 1e-4;

pub fn run_case(cfg: &GradcheckConfig, case: LossCase) -> Result<CaseReport> {
    let spec = AdvantageSpec {
        family: case.family(),
        epsilon_clip: cfg.epsilon_clip,
        length_norm: true,
    };
    let tolerance = cfg.active_tolerance();
    let mut kept = 0;
    let mut discarded = 0;
    let mut max_err = 0.0;
    let mut worst = None;
    let mut index = 0u64;
    let attempts = 100 * cfg.instances as u64;
    while kept < cfg.instances {
        if index >= attempts {
            return Err(EqlenError::Numerical(format!(
                "{}: only {kept} informative instances in {attempts} attempts",
                case.name()
            )));
        }
        let inst = make_instance(cfg, case, index)?;
        index += 1;
        let mut analytic = evaluate(case, &spec, &inst, &inst.policy)?.grad;
        if analytic.max_abs() < INFORMATIVE || near_kink(&inst, cfg.epsilon_clip) {
            discarded += 1;
            continue;
        }
        if case == LossCase::EqlenPair && cfg.fault == Some(Fault::SignFlipEqlenPair) {
            analytic.scale(-1.0);
        }
        let coords = coordinates(VOCAB as usize, &inst.contexts);
        let objective = |p: &PolicyTable| evaluate(case, &spec, &inst, p).map(|o| o.loss).unwrap_or(f64::NAN);
        let numeric = fd_gradient(objective, &inst.policy, &coords, cfg.fd_step)?;
        let (err, w) = relative_error(&analytic, &numeric);
        if err > max_err || worst.is_none() {
            max_err = err;
            worst = w;
        }
        kept += 1;
    }
    Ok(CaseReport {
        case,
        instances: kept,
        discarded,
        max_rel_error: max_err,
        tolerance,
        passed: max_err <= tolerance,
        worst,
    })
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    cfg.validate()?;
    let cases = cfg.cases.iter().map(|&c| run_case(cfg, c)).collect::<Result<Vec<_>>>()?;
    let passed = cases.iter().all(|c| c.passed);
    Ok(GradcheckReport { cases, passed })
}
