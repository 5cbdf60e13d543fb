//! C interface to the dual-track sampler, the tabular policy and the advantage
//! estimators.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `_free` function. Every fallible call returns an
//! [`EqlenStatus`] and, on failure, leaves a message retrievable with
//! [`eqlen_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use eqlen_core::optim::{family_advantages, grpo_advantages, AdvantageFamily};
use eqlen_core::policy::log_prob;
use eqlen_core::reward::{score_rollout, RewardOptions};
use eqlen_core::rollout::{rollout_dualtrack, RolloutConfig};
use eqlen_core::types::{Context, GroupRollout, PolicyTable, Question, Vocab};
use eqlen_core::EqlenError;

/// Window entry standing for "before the first token".
pub const EQLEN_BOS: u32 = u32::MAX;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EqlenStatus {
    Ok = 0,
    /// Null pointer, bad length or a value outside its domain.
    InvalidArgument = 1,
    /// A JSON document failed to parse or validate.
    Config = 2,
    Numerical = 3,
    Io = 4,
    /// A Rust panic was caught at the boundary.
    Internal = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EqlenAdvantageFamily {
    GrpoNorm = 0,
    DrGrpo = 1,
    Rloo = 2,
}

/// Opaque tabular softmax policy.
pub struct EqlenPolicy {
    inner: PolicyTable,
}

/// Opaque scored dual-track rollout.
pub struct EqlenRollout {
    inner: GroupRollout,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(EqlenStatus, String);

impl From<EqlenError> for Failure {
    fn from(e: EqlenError) -> Self {
        let status = match e {
            EqlenError::InvalidInput(_) => EqlenStatus::InvalidArgument,
            EqlenError::Config { .. } | EqlenError::Serde(_) | EqlenError::Csv(_) => EqlenStatus::Config,
            EqlenError::Numerical(_) => EqlenStatus::Numerical,
            EqlenError::Io { .. } => EqlenStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(EqlenStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EqlenStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EqlenStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside eqlen");
            EqlenStatus::Internal
        }
    }
}

unsafe fn slice<'a, T>(data: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(data, len))
}

unsafe fn text<'a>(s: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if s.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    CStr::from_ptr(s).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn policy_ref<'a>(p: *const EqlenPolicy) -> Result<&'a PolicyTable, Failure> {
    p.as_ref().map(|p| &p.inner).ok_or_else(|| invalid("policy handle is null"))
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn eqlen_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Create a uniform policy over `vocab_size` tokens with context order
/// `order`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn eqlen_policy_new(vocab_size: u32, eos_id: u32, order: usize, out: *mut *mut EqlenPolicy) -> EqlenStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let vocab = Vocab::new(vocab_size, eos_id)?;
        let handle = Box::new(EqlenPolicy {
            inner: PolicyTable::new(vocab, order),
        });
        *out = Box::into_raw(handle);
        Ok(())
    })
}

/// # Safety
/// `policy` must come from [`eqlen_policy_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn eqlen_policy_free(policy: *mut EqlenPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Set the logit row of one context. A null `window` sets the default row
/// used by every context without its own. Window entries may be
/// [`EQLEN_BOS`].
///
/// # Safety
/// `window` and `logits` must point to `window_len` and `logits_len`
/// readable elements.
#[no_mangle]
pub unsafe extern "C" fn eqlen_policy_set_logits(
    policy: *mut EqlenPolicy,
    question_id: u32,
    window: *const u32,
    window_len: usize,
    logits: *const f64,
    logits_len: usize,
) -> EqlenStatus {
    guard(|| {
        let p = &mut policy.as_mut().ok_or_else(|| invalid("policy handle is null"))?.inner;
        let row = slice(logits, logits_len, "logits")?.to_vec();
        if window.is_null() {
            p.set_default_logits(row)?;
        } else {
            let ctx = Context {
                question_id,
                window: slice(window, window_len, "window")?.to_vec(),
            };
            p.set_logits(ctx, row)?;
        }
        Ok(())
    })
}

/// Log-probability of `token` in the given context.
///
/// # Safety
/// `window` must point to `window_len` readable elements and `out` to
/// writable storage.
#[no_mangle]
pub unsafe extern "C" fn eqlen_policy_log_prob(
    policy: *const EqlenPolicy,
    question_id: u32,
    window: *const u32,
    window_len: usize,
    token: u32,
    out: *mut f64,
) -> EqlenStatus {
    guard(|| {
        let p = policy_ref(policy)?;
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let ctx = Context {
            question_id,
            window: slice(window, window_len, "window")?.to_vec(),
        };
        if !ctx.is_valid(p.vocab(), p.order()) {
            return Err(invalid("window does not match the policy's order or vocabulary"));
        }
        if !p.vocab().contains(token) {
            return Err(invalid(format!("token {token} outside vocabulary")));
        }
        *out = log_prob(p, &ctx, token);
        Ok(())
    })
}

/// Sample and score one dual-track rollout. `question_json` is a question
/// object (`id`, `prompt`, `verifier`), `config_json` a rollout config
/// (`group_size`, `max_len`, ...).
///
/// # Safety
/// Both strings must be NUL-terminated, `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn eqlen_rollout_dualtrack(
    policy: *const EqlenPolicy,
    question_json: *const c_char,
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut EqlenRollout,
) -> EqlenStatus {
    guard(|| {
        let p = policy_ref(policy)?;
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let question: Question = serde_json::from_str(text(question_json, "question_json")?).map_err(EqlenError::from)?;
        let config: RolloutConfig = serde_json::from_str(text(config_json, "config_json")?).map_err(EqlenError::from)?;
        question.verifier.validate()?;
        let mut rollout = rollout_dualtrack(p, &question, &config, seed)?;
        score_rollout(&mut rollout, &question.verifier, p.vocab().eos_id(), RewardOptions::default())?;
        *out = Box::into_raw(Box::new(EqlenRollout { inner: rollout }));
        Ok(())
    })
}

/// # Safety
/// `rollout` must come from [`eqlen_rollout_dualtrack`] and not be freed
/// twice.
#[no_mangle]
pub unsafe extern "C" fn eqlen_rollout_free(rollout: *mut EqlenRollout) {
    if !rollout.is_null() {
        drop(Box::from_raw(rollout));
    }
}

/// Number of harvested pairs, skipped ones included.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn eqlen_rollout_pair_count(rollout: *const EqlenRollout, out: *mut usize) -> EqlenStatus {
    guard(|| {
        let r = rollout.as_ref().ok_or_else(|| invalid("rollout handle is null"))?;
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        *out = r.inner.pairs.len();
        Ok(())
    })
}

/// Serialize the rollout. Release the string with [`eqlen_string_free`].
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn eqlen_rollout_to_json(rollout: *const EqlenRollout, out: *mut *mut c_char) -> EqlenStatus {
    guard(|| {
        let r = rollout.as_ref().ok_or_else(|| invalid("rollout handle is null"))?;
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let json = serde_json::to_string(&r.inner).map_err(EqlenError::from)?;
        *out = CString::new(json).map_err(|_| invalid("rollout JSON contains NUL"))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn eqlen_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Group advantages of `len` rewards written to `out`. A zero-variance
/// group under `GrpoNorm` yields all zeros.
///
/// # Safety
/// `rewards` must hold `len` readable and `out` `len` writable elements.
#[no_mangle]
pub unsafe extern "C" fn eqlen_advantages(family: EqlenAdvantageFamily, rewards: *const f64, len: usize, out: *mut f64) -> EqlenStatus {
    guard(|| {
        let r = slice(rewards, len, "rewards")?;
        if len < 2 {
            return Err(invalid("need at least two rewards"));
        }
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Failure(EqlenStatus::Numerical, "non-finite reward".into()));
        }
        let adv = match family {
            EqlenAdvantageFamily::GrpoNorm => grpo_advantages(r).advantages,
            EqlenAdvantageFamily::DrGrpo => family_advantages(AdvantageFamily::DrGrpo, r),
            EqlenAdvantageFamily::Rloo => family_advantages(AdvantageFamily::Rloo, r),
        };
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&adv);
        Ok(())
    })
}
