use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use eqlen_ffi::*;

fn last_error() -> String {
    let p = eqlen_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn policy(vocab: u32, order: usize) -> *mut EqlenPolicy {
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { eqlen_policy_new(vocab, vocab - 1, order, &mut p) }, EqlenStatus::Ok);
    p
}

#[test]
fn uniform_log_prob_and_row_update() {
    let p = policy(4, 2);
    let window = [EQLEN_BOS, EQLEN_BOS];
    let mut lp = 0.0;
    unsafe {
        assert_eq!(eqlen_policy_log_prob(p, 0, window.as_ptr(), 2, 1, &mut lp), EqlenStatus::Ok);
        assert!((lp - 0.25f64.ln()).abs() < 1e-15);
        let row = [0.0, 2f64.ln(), 0.0, 0.0];
        assert_eq!(eqlen_policy_set_logits(p, 0, window.as_ptr(), 2, row.as_ptr(), 4), EqlenStatus::Ok);
        assert_eq!(eqlen_policy_log_prob(p, 0, window.as_ptr(), 2, 1, &mut lp), EqlenStatus::Ok);
        assert!((lp - 0.4f64.ln()).abs() < 1e-15);
        eqlen_policy_free(p);
    }
}

#[test]
fn bad_arguments_report_status_and_message() {
    let p = policy(4, 2);
    let mut lp = 0.0;
    unsafe {
        let short = [EQLEN_BOS];
        assert_eq!(eqlen_policy_log_prob(p, 0, short.as_ptr(), 1, 1, &mut lp), EqlenStatus::InvalidArgument);
        assert!(last_error().contains("window"));
        let row = [0.0; 3];
        assert_eq!(eqlen_policy_set_logits(p, 0, ptr::null(), 0, row.as_ptr(), 3), EqlenStatus::InvalidArgument);
        assert_eq!(eqlen_policy_log_prob(ptr::null(), 0, short.as_ptr(), 1, 1, &mut lp), EqlenStatus::InvalidArgument);
        let mut q = ptr::null_mut();
        assert_eq!(eqlen_policy_new(4, 9, 1, &mut q), EqlenStatus::Config);
        assert!(q.is_null());
        eqlen_policy_free(p);
    }
}

#[test]
fn advantages_match_core() {
    let rewards = [1.0, 0.0, 0.0, 1.0];
    let mut out = [0.0; 4];
    unsafe {
        assert_eq!(eqlen_advantages(EqlenAdvantageFamily::GrpoNorm, rewards.as_ptr(), 4, out.as_mut_ptr()), EqlenStatus::Ok);
        assert_eq!(out, [1.0, -1.0, -1.0, 1.0]);
        assert_eq!(eqlen_advantages(EqlenAdvantageFamily::Rloo, rewards.as_ptr(), 4, out.as_mut_ptr()), EqlenStatus::Ok);
        assert_eq!(out.iter().sum::<f64>(), 0.0);
        let nan = [f64::NAN, 1.0];
        assert_eq!(eqlen_advantages(EqlenAdvantageFamily::DrGrpo, nan.as_ptr(), 2, out.as_mut_ptr()), EqlenStatus::Numerical);
        assert_eq!(eqlen_advantages(EqlenAdvantageFamily::DrGrpo, rewards.as_ptr(), 1, out.as_mut_ptr()), EqlenStatus::InvalidArgument);
    }
}

#[test]
fn dualtrack_rollout_round_trips_through_json() {
    let p = policy(6, 1);
    let question = CString::new(r#"{"id": 3, "prompt": [1], "verifier": {"kind": "parity", "target": 0}}"#).unwrap();
    let config = CString::new(r#"{"group_size": 4, "max_len": 12}"#).unwrap();
    let mut r = ptr::null_mut();
    unsafe {
        assert_eq!(eqlen_rollout_dualtrack(p, question.as_ptr(), config.as_ptr(), 11, &mut r), EqlenStatus::Ok);
        let mut n = 0usize;
        assert_eq!(eqlen_rollout_pair_count(r, &mut n), EqlenStatus::Ok);
        let mut s = ptr::null_mut();
        assert_eq!(eqlen_rollout_to_json(r, &mut s), EqlenStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(CStr::from_ptr(s).to_str().unwrap()).unwrap();
        assert_eq!(v["question_id"], 3);
        let pairs = v["pairs"].as_array().unwrap();
        assert_eq!(pairs.len(), n);
        for pair in pairs {
            assert_eq!(pair["seg_plus"].as_array().unwrap().len(), pair["seg_minus"].as_array().unwrap().len());
        }
        eqlen_string_free(s);
        eqlen_rollout_free(r);

        let odd = CString::new(r#"{"group_size": 3, "max_len": 12}"#).unwrap();
        assert_eq!(eqlen_rollout_dualtrack(p, question.as_ptr(), odd.as_ptr(), 11, &mut r), EqlenStatus::Config);
        assert!(last_error().contains("group_size"));
        let junk = CString::new("{").unwrap();
        assert_eq!(eqlen_rollout_dualtrack(p, junk.as_ptr(), config.as_ptr(), 11, &mut r), EqlenStatus::Config);
        eqlen_policy_free(p);
    }
}

#[test]
fn generated_header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/eqlen.h")).unwrap();
    for name in [
        "eqlen_policy_new",
        "eqlen_policy_free",
        "eqlen_policy_set_logits",
        "eqlen_policy_log_prob",
        "eqlen_rollout_dualtrack",
        "eqlen_rollout_to_json",
        "eqlen_advantages",
        "eqlen_last_error",
        "eqlen_string_free",
        "EQLEN_STATUS_OK",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
    // Compile the header as C when a compiler is available.
    if let Ok(status) = Command::new("cc")
        .args(["-fsyntax-only", "-x", "c", concat!(env!("CARGO_MANIFEST_DIR"), "/include/eqlen.h")])
        .status()
    {
        assert!(status.success());
    }
}
