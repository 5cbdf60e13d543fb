//! Sampling, exact log-probabilities and score-function gradients of the
//! tabular softmax policy, plus the central-difference oracle used to check
//! every analytic gradient in the crate.

use crate::error::{EqlenError, Result};
use crate::rng::RngStream;
use crate::types::{Context, GradientVector, PolicyTable, TokenId};

/// `log Σ exp(x)`, shifted by the maximum.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Next-token distribution at `ctx`.
pub fn token_distribution(policy: &PolicyTable, ctx: &Context) -> Result<Vec<f64>> {
    if !ctx.is_valid(policy.vocab(), policy.order()) {
        return Err(EqlenError::InvalidInput(format!(
            "context {ctx:?} does not match order {} / vocab {}",
            policy.order(),
            policy.vocab().size()
        )));
    }
    Ok(softmax(policy.logits_for(ctx)))
}

/// Draw one token by inverting the CDF at a uniform draw.
pub fn sample_token(policy: &PolicyTable, ctx: &Context, rng: &mut RngStream) -> TokenId {
    let probs = softmax(policy.logits_for(ctx));
    sample_from(&probs, rng.uniform())
}

pub(crate) fn sample_from(probs: &[f64], u: f64) -> TokenId {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i as TokenId;
        }
    }
    // u landed in the rounding gap above the accumulated mass.
    last_positive as TokenId
}

pub fn log_prob(policy: &PolicyTable, ctx: &Context, token: TokenId) -> f64 {
    let logits = policy.logits_for(ctx);
    logits[token as usize] - log_sum_exp(logits)
}

/// Shannon entropy (nats) of the next-token distribution.
pub fn entropy(policy: &PolicyTable, ctx: &Context) -> f64 {
    let logits = policy.logits_for(ctx);
    let lse = log_sum_exp(logits);
    logits
        .iter()
        .map(|&z| {
            let lp = z - lse;
            let p = lp.exp();
            if p > 0.0 {
                -p * lp
            } else {
                0.0
            }
        })
        .sum()
}

/// Accumulate `coeff * ∇ log π(token | ctx)` into `grad`.
///
/// The score of a softmax row is `e_token − p`, touching only `ctx`'s row.
pub fn add_score(grad: &mut GradientVector, policy: &PolicyTable, ctx: &Context, token: TokenId, coeff: f64) {
    if coeff == 0.0 {
        return;
    }
    let probs = softmax(policy.logits_for(ctx));
    let row = grad.row_mut(ctx);
    for (v, (g, p)) in row.iter_mut().zip(&probs).enumerate() {
        let indicator = if v as TokenId == token { 1.0 } else { 0.0 };
        *g += coeff * (indicator - p);
    }
}

pub fn grad_log_prob(policy: &PolicyTable, ctx: &Context, token: TokenId) -> GradientVector {
    let mut g = GradientVector::zeros(policy.vocab().len());
    // Materialize the row even when it would be all zero.
    g.row_mut(ctx);
    add_score(&mut g, policy, ctx, token, 1.0);
    g
}

/// Context at which each token of `segment` is emitted, after reading
/// `context_tokens`.
pub fn segment_contexts(order: usize, question_id: u32, context_tokens: &[TokenId], segment: &[TokenId]) -> Vec<Context> {
    let mut ctx = Context::after(question_id, order, context_tokens);
    segment
        .iter()
        .map(|&t| {
            let here = ctx.clone();
            ctx.push(t);
            here
        })
        .collect()
}

/// Per-token log-probabilities of `segment` conditioned on `context_tokens`.
pub fn token_log_probs(policy: &PolicyTable, question_id: u32, context_tokens: &[TokenId], segment: &[TokenId]) -> Vec<f64> {
    segment_contexts(policy.order(), question_id, context_tokens, segment)
        .iter()
        .zip(segment)
        .map(|(c, &t)| log_prob(policy, c, t))
        .collect()
}

pub fn sequence_log_prob(policy: &PolicyTable, question_id: u32, context_tokens: &[TokenId], segment: &[TokenId]) -> f64 {
    token_log_probs(policy, question_id, context_tokens, segment).iter().sum()
}

/// Central-difference gradient of `f` over the coordinates in `coords`.
///
/// Each coordinate is perturbed by `±step` on a copy of the policy; the
/// policy passed in is never modified.
pub fn fd_gradient<F>(f: F, policy: &PolicyTable, coords: &[(Context, TokenId)], step: f64) -> Result<GradientVector>
where
    F: Fn(&PolicyTable) -> f64,
{
    if !(step > 0.0) {
        return Err(EqlenError::InvalidInput(format!("finite-difference step {step} must be > 0")));
    }
    let mut out = GradientVector::zeros(policy.vocab().len());
    let mut work = policy.clone();
    for (ctx, token) in coords {
        let base = work.logit(ctx, *token);
        *work.logit_mut(ctx, *token) = base + step;
        let up = f(&work);
        *work.logit_mut(ctx, *token) = base - step;
        let down = f(&work);
        *work.logit_mut(ctx, *token) = base;
        if !up.is_finite() || !down.is_finite() {
            return Err(EqlenError::Numerical(format!(
                "objective not finite when perturbing {ctx:?}/{token}"
            )));
        }
        out.set(ctx, *token, (up - down) / (2.0 * step));
    }
    Ok(out)
}

/// Every `(context, token)` coordinate for the given contexts.
pub fn coordinates<'a>(vocab_size: usize, contexts: impl IntoIterator<Item = &'a Context>) -> Vec<(Context, TokenId)> {
    let mut uniq: Vec<&Context> = contexts.into_iter().collect();
    uniq.sort();
    uniq.dedup();
    uniq.into_iter()
        .flat_map(|c| (0..vocab_size as TokenId).map(move |t| (c.clone(), t)))
        .collect()
}
